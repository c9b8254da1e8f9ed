#pragma once

#include <torch/torch.h>

#include <utility>
#include <vector>

#include "pat/stage.hpp"

namespace pat {

// Region-aware attention: every student stage is pooled to a small patch grid,
// projected to width d, concatenated (stage 1..4) into n_q tokens, blended by
// one bare single-head self-attention, then split back per stage and mapped
// onto the teacher's stage shapes.

struct RaaConfig {
  int64_t n_q = 64;  // total query count, n_q / 4 patches per stage
  int64_t d = 128;   // token width
  // When set, a stage map smaller than the patch grid is rejected instead of
  // being replicated up to the grid.
  bool strict_grid = false;

  // Patch grid (rows, cols) per stage. n_q / 4 must be a square g*g or a
  // near-square g*(g+1); anything else throws ConfigError("raa.nq").
  std::pair<int64_t, int64_t> grid() const;
  int64_t tokens_per_stage() const { return n_q / kNumStages; }
  void validate() const;
};

struct BlendedTokens {
  torch::Tensor tokens;  // (B, n_q, d)
  std::vector<std::pair<int64_t, int64_t>> stage_slices;  // [begin, end) per stage
  int64_t grid_h = 0;
  int64_t grid_w = 0;
};

struct AttentionResult {
  torch::Tensor output;     // softmax(Q K^T / sqrt(d)) V, (B, N, d)
  torch::Tensor attention;  // (B, N, N), rows sum to 1
};

// Bare scaled dot-product self-attention over tokens (B, N, d). Weights are
// (d, d) matrices applied as W * token, i.e. Q = tokens * W_q^T.
AttentionResult self_attention(const torch::Tensor& tokens, const torch::Tensor& w_q, const torch::Tensor& w_k,
                               const torch::Tensor& w_v);

// Adaptive-average-pools a stage (token stages are first re-gridded) to the
// patch grid and applies the 1x1 projector. Returns (B, gh*gw, d) in row-major
// patch order. Throws ShapeError naming the stage when strict and the map is
// smaller than the grid.
torch::Tensor patchify_and_project(const StageFeature& stage, torch::nn::Conv2d& projector,
                                   std::pair<int64_t, int64_t> grid, bool strict_grid = false);

// Concatenates four (B, n, d) token sets in stage order and attends over them.
// Throws ShapeError when the four inputs disagree in shape.
std::pair<BlendedTokens, torch::Tensor> blend(const std::vector<torch::Tensor>& projected,
                                              std::pair<int64_t, int64_t> grid, const torch::Tensor& w_q,
                                              const torch::Tensor& w_k, const torch::Tensor& w_v);

// Maps one stage's blended (B, gh*gw, d) block onto a teacher stage shape.
// Spatial target: 1x1 conv d -> C then bilinear resize to (H, W).
// Token target: linear token map gh*gw -> N (initialized to bilinear
// interpolation) then linear d -> D.
class StageAlignerImpl : public torch::nn::Module {
 public:
  StageAlignerImpl(int64_t d, std::pair<int64_t, int64_t> grid, StageShape target);
  torch::Tensor forward(const torch::Tensor& block);
  const StageShape& target() const { return target_; }

  // Sets the aligner to pass the block through unchanged (requires a target
  // whose channel count is d and, for tokens, token count gh*gw).
  void set_identity();

  torch::nn::Conv2d channel_map{nullptr};
  torch::nn::Linear token_map{nullptr};
  torch::nn::Linear dim_map{nullptr};

 private:
  int64_t d_;
  std::pair<int64_t, int64_t> grid_;
  StageShape target_;
};
TORCH_MODULE(StageAligner);

struct RaaOutput {
  std::vector<StageFeature> aligned;  // teacher-shaped, stage 1..4
  BlendedTokens blended;              // post-attention tokens
  torch::Tensor attention;            // (B, n_q, n_q)
};

class RegionAwareAttentionImpl : public torch::nn::Module {
 public:
  RegionAwareAttentionImpl(RaaConfig config, const StageShapes& student, const StageShapes& teacher);

  RaaOutput forward(const std::vector<StageFeature>& student_stages);

  std::vector<torch::Tensor> project_all(const std::vector<StageFeature>& student_stages);
  // Throws BindingError when teacher_shapes does not list exactly the four
  // shapes this module was built for, or when blended has != 4 slices.
  std::vector<StageFeature> split_and_align(const BlendedTokens& blended, const std::vector<StageShape>& teacher_shapes);

  const RaaConfig& config() const { return config_; }
  const StageShapes& teacher_shapes() const { return teacher_; }

  std::vector<torch::nn::Conv2d> projectors;
  torch::nn::Linear w_q{nullptr}, w_k{nullptr}, w_v{nullptr};
  std::vector<StageAligner> aligners;

 private:
  RaaConfig config_;
  StageShapes student_;
  StageShapes teacher_;
};
TORCH_MODULE(RegionAwareAttention);

// Closed-form parameter count of a RegionAwareAttention built with these
// arguments.
int64_t raa_parameter_count(const RaaConfig& config, const StageShapes& student, const StageShapes& teacher);

// Row/column permutation that reorders native stage-major queries
// (stage, patch) into patch-major order (patch, stage).
std::vector<int64_t> patch_major_order(int64_t n_q);

}  // namespace pat
