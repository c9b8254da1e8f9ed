#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace pat {

inline constexpr int kNumStages = 4;

enum class Layout { kSpatial, kTokens };

// Per-sample shape of one stage output. Spatial: {C, H, W}; tokens: {N, D}
// where the N tokens form a square grid in row-major order.
struct StageShape {
  Layout layout = Layout::kSpatial;
  std::vector<int64_t> dims;

  static StageShape spatial(int64_t c, int64_t h, int64_t w) { return {Layout::kSpatial, {c, h, w}}; }
  static StageShape tokens(int64_t n, int64_t d) { return {Layout::kTokens, {n, d}}; }

  // Channel count C (spatial) or embedding width D (tokens).
  int64_t channels() const { return layout == Layout::kSpatial ? dims[0] : dims[1]; }
  int64_t grid_h() const;
  int64_t grid_w() const;
  int64_t numel() const;
  std::vector<int64_t> with_batch(int64_t batch) const;
  std::string str() const;

  bool operator==(const StageShape&) const = default;
};

using StageShapes = std::array<StageShape, kNumStages>;

struct StageFeature {
  torch::Tensor data;
  Layout layout = Layout::kSpatial;
  int stage_index = 1;

  StageShape shape() const;
};

// Side length of a square token grid; throws ShapeError when n is not a square.
int64_t square_side(int64_t n);

// (B,C,H,W) unchanged; (B,N,D) tokens re-gridded to (B,D,g,g).
torch::Tensor to_spatial(const torch::Tensor& data, Layout layout);
// Inverse of to_spatial for a target layout: (B,C,H,W) -> (B,H*W,C) when tokens.
torch::Tensor from_spatial(const torch::Tensor& spatial, Layout layout);

}  // namespace pat
