#pragma once

// Central finite differences for scalar losses. Test-only: independent of the
// autograd path it is checked against.

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

namespace pat::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  int64_t checked = 0;
};

// Relative error with a floor on the denominator so coordinates whose true
// gradient is ~0 are judged on absolute error.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares d loss / d param from autograd with central differences on up to
// max_coords randomly chosen coordinates of `param` (all if it is small).
// `loss` must recompute from scratch on each call. param must be float64.
inline GradCheck check_gradient(const std::function<torch::Tensor()>& loss, torch::Tensor param, int64_t max_coords = 16,
                                double h = 1e-5, uint64_t seed = 0, double floor = 1e-6) {
  auto value = loss();
  auto grads = torch::autograd::grad({value}, {param}, {}, /*retain_graph=*/false, /*create_graph=*/false,
                                     /*allow_unused=*/true);
  auto analytic = grads[0].defined() ? grads[0].contiguous() : torch::zeros_like(param);
  const auto n = param.numel();
  std::vector<int64_t> coords(n);
  std::iota(coords.begin(), coords.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  if (static_cast<int64_t>(coords.size()) > max_coords) coords.resize(max_coords);

  GradCheck out;
  torch::NoGradGuard no_grad;
  auto flat = param.view(-1);
  for (auto i : coords) {
    const double orig = flat[i].item<double>();
    flat[i].fill_(orig + h);
    const double plus = loss().item<double>();
    flat[i].fill_(orig - h);
    const double minus = loss().item<double>();
    flat[i].fill_(orig);
    const double numeric = (plus - minus) / (2 * h);
    const double a = analytic.view(-1)[i].item<double>();
    out.max_rel_error = std::max(out.max_rel_error, rel_error(a, numeric, floor));
    out.max_abs_error = std::max(out.max_abs_error, std::abs(a - numeric));
    ++out.checked;
  }
  return out;
}

}  // namespace pat::testing
