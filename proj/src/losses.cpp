#include "pat/losses.hpp"

#include <cmath>

#include "pat/errors.hpp"

namespace pat {

namespace F = torch::nn::functional;

void LossWeights::validate() const {
  auto check_weight = [](double v, const char* name) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError(std::string("loss.") + name, "must be finite and >= 0");
  };
  check_weight(alpha, "alpha");
  check_weight(beta, "beta");
  check_weight(gamma, "gamma");
  if (!std::isfinite(tau_kd) || tau_kd <= 0.0) throw ConfigError("loss.tau_kd", "must be > 0");
  if (!std::isfinite(tau_reg) || tau_reg <= 0.0) throw ConfigError("loss.tau_reg", "must be > 0");
}

void HclConfig::validate() const {
  if (levels.empty()) throw ConfigError("loss.hcl_levels", "needs at least one level");
  int64_t prev = -1;
  for (size_t i = 0; i < levels.size(); ++i) {
    const auto l = levels[i];
    if (l == 0) {
      if (i != 0) throw ConfigError("loss.hcl_levels", "'full' must come first");
      continue;
    }
    if (l < 1) throw ConfigError("loss.hcl_levels", "levels must be >= 1");
    if (prev > 0 && l >= prev) throw ConfigError("loss.hcl_levels", "levels must be strictly decreasing");
    prev = l;
  }
}

std::vector<std::pair<int64_t, int64_t>> HclConfig::sizes_for(int64_t h, int64_t w) const {
  std::vector<std::pair<int64_t, int64_t>> out;
  auto add = [&](std::pair<int64_t, int64_t> s) {
    for (const auto& e : out) {
      if (e == s) return;
    }
    out.push_back(s);
  };
  for (auto l : levels) {
    if (l == 0) {
      add({h, w});
    } else if (l <= std::min(h, w)) {
      add({l, l});
    }
  }
  if (out.empty()) add({1, 1});
  return out;
}

torch::Tensor kl_divergence(const torch::Tensor& p, const torch::Tensor& log_q) {
  // xlogy gives 0 * log 0 = 0.
  auto pointwise = torch::xlogy(p, p) - p * log_q;
  return pointwise.sum(-1).mean();
}

namespace {

void check_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw ShapeError(os.str());
  }
}

void check_tau(double tau) {
  if (!std::isfinite(tau) || tau <= 0.0) throw ConfigError("tau", "temperature must be > 0");
}

}  // namespace

torch::Tensor kl_distill(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits, double tau) {
  check_same(teacher_logits, student_logits, "kl_distill");
  check_tau(tau);
  // Log-space form so identical inputs give exactly zero.
  auto log_p_t = torch::log_softmax(teacher_logits / tau, -1);
  auto log_p_s = torch::log_softmax(student_logits / tau, -1);
  auto kl = (log_p_t.exp() * (log_p_t - log_p_s)).sum(-1).mean();
  return kl * (tau * tau);
}

torch::Tensor hcl(const torch::Tensor& teacher_spatial, const torch::Tensor& student_spatial, const HclConfig& config) {
  check_same(teacher_spatial, student_spatial, "hcl");
  if (teacher_spatial.dim() != 4) throw ShapeError("hcl expects (B,C,H,W) maps");
  const auto sizes = config.sizes_for(teacher_spatial.size(2), teacher_spatial.size(3));
  torch::Tensor total;
  for (const auto& [h, w] : sizes) {
    torch::Tensor term;
    if (h == teacher_spatial.size(2) && w == teacher_spatial.size(3)) {
      term = F::mse_loss(student_spatial, teacher_spatial);
    } else {
      auto opts = F::AdaptiveAvgPool2dFuncOptions({h, w});
      term = F::mse_loss(F::adaptive_avg_pool2d(student_spatial, opts), F::adaptive_avg_pool2d(teacher_spatial, opts));
    }
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(sizes.size());
}

torch::Tensor hcl(const StageFeature& teacher, const StageFeature& student, const HclConfig& config) {
  if (teacher.layout != student.layout) throw ShapeError("hcl: layout mismatch");
  check_same(teacher.data, student.data, "hcl");
  return hcl(to_spatial(teacher.data, teacher.layout), to_spatial(student.data, student.layout), config);
}

torch::Tensor feature_distill(const std::vector<StageFeature>& teacher, const std::vector<StageFeature>& student,
                              const HclConfig& config) {
  if (teacher.size() != static_cast<size_t>(kNumStages) || student.size() != static_cast<size_t>(kNumStages)) {
    throw ContractError("feature_distill needs 4 stage pairs, got " + std::to_string(teacher.size()) + " and " +
                        std::to_string(student.size()));
  }
  torch::Tensor total;
  for (int s = 0; s < kNumStages; ++s) {
    auto term = hcl(teacher[s], student[s], config);
    total = total.defined() ? total + term : term;
  }
  return total;
}

torch::Tensor reg_loss(const torch::Tensor& clean_logits, const torch::Tensor& adapted_logits, double tau) {
  return kl_distill(clean_logits.detach(), adapted_logits, tau);
}

torch::Tensor total_loss(const LossComponents& parts, const LossWeights& weights) {
  auto as_double = [](const torch::Tensor& t, const char* name) -> torch::Tensor {
    if (!t.defined()) return torch::zeros({}, torch::kFloat64);
    auto v = t.to(torch::kFloat64);
    if (!std::isfinite(v.item<double>())) throw NumericError(name, "loss component is not finite");
    return v;
  };
  auto ce = as_double(parts.ce, "ce");
  auto kl = as_double(parts.kl, "kl");
  auto fd = as_double(parts.fd, "fd");
  auto reg = as_double(parts.reg, "reg");
  return ce + weights.alpha * kl + weights.beta * fd + weights.gamma * reg;
}

}  // namespace pat
