#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <utility>
#include <vector>

#include "pat/stage.hpp"

namespace pat {

struct LossWeights {
  double alpha = 1.0;   // logit KL
  double beta = 1.0;    // stage feature distance
  double gamma = 1.0;   // teacher regularization
  double tau_kd = 4.0;
  double tau_reg = 1.0;
  void validate() const;  // throws ConfigError naming the field
};

// Pyramid of pooled MSE terms. 0 stands for the full resolution; the other
// entries are square side lengths, strictly decreasing.
struct HclConfig {
  std::vector<int64_t> levels{0, 4, 2, 1};
  void validate() const;
  // Distinct (h, w) pooling sizes used for an h x w map: the full size plus
  // every listed side not exceeding min(h, w).
  std::vector<std::pair<int64_t, int64_t>> sizes_for(int64_t h, int64_t w) const;
};

// Batch-mean KL(p || q) from probabilities p and log-probabilities of q.
// Zero-probability entries of p contribute nothing.
torch::Tensor kl_divergence(const torch::Tensor& p, const torch::Tensor& log_q);

// tau^2 * mean_b KL(softmax(teacher/tau) || softmax(student/tau)).
torch::Tensor kl_distill(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits, double tau);

// Level-averaged MSE between adaptively pooled copies of two maps. Token
// features are re-gridded first. Throws ShapeError on a shape mismatch.
torch::Tensor hcl(const StageFeature& teacher, const StageFeature& student, const HclConfig& config);
torch::Tensor hcl(const torch::Tensor& teacher_spatial, const torch::Tensor& student_spatial, const HclConfig& config);

// Sum of per-stage hcl. Throws ContractError unless both sides have 4 stages.
torch::Tensor feature_distill(const std::vector<StageFeature>& teacher, const std::vector<StageFeature>& student,
                              const HclConfig& config);

// KL(p_clean || p_adapted); the clean logits are detached.
torch::Tensor reg_loss(const torch::Tensor& clean_logits, const torch::Tensor& adapted_logits, double tau);

struct LossComponents {
  torch::Tensor ce, kl, fd, reg;
};

// ce + alpha*kl + beta*fd + gamma*reg, evaluated in float64. Undefined
// components count as zero. Throws NumericError naming the first non-finite
// component.
torch::Tensor total_loss(const LossComponents& parts, const LossWeights& weights);

}  // namespace pat
