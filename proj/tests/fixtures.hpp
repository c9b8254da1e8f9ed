#pragma once

#include <torch/torch.h>

#include <vector>

#include "pat/stage.hpp"

namespace pat::testing {

inline std::vector<StageFeature> random_stages(const StageShapes& shapes, int64_t batch,
                                               torch::Dtype dtype = torch::kFloat32) {
  std::vector<StageFeature> out;
  for (int s = 0; s < kNumStages; ++s) {
    out.push_back({torch::randn(shapes[s].with_batch(batch), torch::TensorOptions().dtype(dtype)), shapes[s].layout,
                   s + 1});
  }
  return out;
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

// A small spatial stage ladder for micro checks.
inline StageShapes micro_spatial(int64_t c = 2, int64_t side = 4) {
  return {StageShape::spatial(c, side, side), StageShape::spatial(c + 1, side / 2, side / 2),
          StageShape::spatial(c + 2, side / 2, side / 2), StageShape::spatial(c + 3, 1, 1)};
}

inline StageShapes micro_tokens(int64_t n = 4, int64_t d = 3) {
  return {StageShape::tokens(n, d), StageShape::tokens(n, d), StageShape::tokens(n, d), StageShape::tokens(n, d)};
}

}  // namespace pat::testing
