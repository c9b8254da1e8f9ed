#pragma once

#include <torch/torch.h>

#include <array>
#include <vector>

#include "pat/backbones.hpp"
#include "pat/stage.hpp"

namespace pat {

// Maps a stage feature of one shape onto another: re-grid tokens, 1x1
// channel projection, bilinear resize to the target grid, flatten back to
// tokens when the target is token-shaped. Used for the AFP student
// projection and for the FitNet baseline hints.
class StageProjectorImpl : public torch::nn::Module {
 public:
  StageProjectorImpl(StageShape source, StageShape target);
  torch::Tensor forward(const torch::Tensor& x);
  void set_identity();
  const StageShape& source() const { return source_; }
  const StageShape& target() const { return target_; }

  torch::nn::Conv2d proj{nullptr};

 private:
  StageShape source_;
  StageShape target_;
};
TORCH_MODULE(StageProjector);

// Channel-concat reducer 2C -> C. Initialized to select the teacher half.
class FusionBlockImpl : public torch::nn::Module {
 public:
  explicit FusionBlockImpl(StageShape shape);
  // feedback and teacher share the teacher stage shape.
  torch::Tensor forward(const torch::Tensor& feedback, const torch::Tensor& teacher);
  torch::nn::Conv2d conv{nullptr};  // spatial
  torch::nn::Linear fc{nullptr};    // tokens

 private:
  StageShape shape_;
};
TORCH_MODULE(FusionBlock);

// x + branch(x); branch = conv3x3 -> GELU -> conv3x3 (Conv1d k=3 along the
// token axis for token features) with the last layer zero-initialized.
class PromptBlockImpl : public torch::nn::Module {
 public:
  explicit PromptBlockImpl(StageShape shape);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor branch(const torch::Tensor& x);
  std::vector<torch::Tensor> branch_parameters();

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::Conv1d tconv1{nullptr}, tconv2{nullptr};

 private:
  StageShape shape_;
};
TORCH_MODULE(PromptBlock);

enum class FeedbackMode {
  kBatchMean,  // batch-average the discrepancy and broadcast it
  kPerSample,  // slot-wise, truncated or zero-padded to the current batch
};

struct AfpConfig {
  std::vector<int> active_stages{1, 2, 3, 4};
  bool use_feedback = true;
  FeedbackMode mode = FeedbackMode::kBatchMean;
  void validate() const;
};

// Single-slot store of the previous step's clean teacher stages and raw
// student stages. Contents are detached copies.
struct FeedbackBuffer {
  std::array<torch::Tensor, kNumStages> prev_teacher;
  std::array<torch::Tensor, kNumStages> prev_student;
  bool initialized = false;

  void update(const std::vector<StageFeature>& clean_teacher, const std::vector<StageFeature>& raw_student);
  void reset();
};

class AdaptiveFeedbackPromptsImpl : public torch::nn::Module {
 public:
  AdaptiveFeedbackPromptsImpl(AfpConfig config, const StageShapes& teacher, const StageShapes& student);

  bool is_active(int stage) const;
  const AfpConfig& config() const { return config_; }
  const StageShapes& teacher_shapes() const { return teacher_; }

  // M(prev_student) - prev_teacher for stage (1-based), reduced per the
  // feedback mode, sized for `batch`. Exact zeros when the buffer is empty or
  // feedback is disabled. Throws ContractError for an inactive stage.
  torch::Tensor compute_feedback(const FeedbackBuffer& buffer, int stage, int64_t batch,
                                 torch::TensorOptions options = {});

  // PB(FB(feedback ++ teacher)). Throws ShapeError when the two disagree.
  torch::Tensor afp_stage(const torch::Tensor& teacher_feature, const torch::Tensor& feedback, int stage);

  FusionBlock& fusion(int stage) { return fusion_.at(stage - 1); }
  PromptBlock& prompt(int stage) { return prompt_.at(stage - 1); }
  StageProjector& student_projector(int stage) { return projector_.at(stage - 1); }

 private:
  AfpConfig config_;
  StageShapes teacher_;
  StageShapes student_;
  std::vector<FusionBlock> fusion_;
  std::vector<PromptBlock> prompt_;
  std::vector<StageProjector> projector_;
};
TORCH_MODULE(AdaptiveFeedbackPrompts);

struct AdaptedPass {
  std::vector<StageFeature> stages;    // F^T' per stage (raw output where inactive)
  std::vector<torch::Tensor> feedback;  // feedback used per stage (undefined where inactive)
  torch::Tensor logits;                 // head output of the adapted pass
};

// Teacher pass with AFP_i applied to the output of stage i for every active
// i; the adapted feature feeds stage i+1 (AFP_4 feeds the head).
AdaptedPass teacher_forward_adapted(StagedBackboneImpl& teacher, const torch::Tensor& images,
                                    AdaptiveFeedbackPromptsImpl& afp, const FeedbackBuffer& buffer);

// Closed-form parameter count of an AdaptiveFeedbackPrompts.
int64_t afp_parameter_count(const AfpConfig& config, const StageShapes& teacher, const StageShapes& student);
int64_t stage_projector_parameter_count(const StageShape& source, const StageShape& target);

}  // namespace pat
