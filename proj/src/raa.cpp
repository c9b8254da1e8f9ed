#include "pat/raa.hpp"

#include <cmath>

#include "pat/errors.hpp"

namespace pat {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

std::pair<int64_t, int64_t> RaaConfig::grid() const {
  if (n_q <= 0 || n_q % kNumStages != 0) {
    throw ConfigError("raa.nq", "must be a positive multiple of 4, got " + std::to_string(n_q));
  }
  const auto per_stage = n_q / kNumStages;
  const auto h = static_cast<int64_t>(std::floor(std::sqrt(static_cast<double>(per_stage)) + 1e-9));
  if (h * h == per_stage) return {h, h};
  if (h * (h + 1) == per_stage) return {h, h + 1};
  throw ConfigError("raa.nq", "n_q/4 = " + std::to_string(per_stage) + " is neither g*g nor g*(g+1)");
}

void RaaConfig::validate() const {
  grid();
  if (d <= 0) throw ConfigError("raa.d", "must be positive");
}

AttentionResult self_attention(const torch::Tensor& tokens, const torch::Tensor& w_q, const torch::Tensor& w_k,
                               const torch::Tensor& w_v) {
  const auto d = tokens.size(-1);
  auto q = torch::matmul(tokens, w_q.t());
  auto k = torch::matmul(tokens, w_k.t());
  auto v = torch::matmul(tokens, w_v.t());
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(d));
  auto attention = torch::softmax(scores, -1);
  return {torch::matmul(attention, v), attention};
}

torch::Tensor patchify_and_project(const StageFeature& stage, nn::Conv2d& projector, std::pair<int64_t, int64_t> grid,
                                   bool strict_grid) {
  auto spatial = to_spatial(stage.data, stage.layout);
  const auto [gh, gw] = grid;
  if (strict_grid && (spatial.size(2) < gh || spatial.size(3) < gw)) {
    throw ShapeError("stage " + std::to_string(stage.stage_index) + " resolution " + std::to_string(spatial.size(2)) +
                     "x" + std::to_string(spatial.size(3)) + " is smaller than the " + std::to_string(gh) + "x" +
                     std::to_string(gw) + " patch grid");
  }
  auto pooled = F::adaptive_avg_pool2d(spatial, F::AdaptiveAvgPool2dFuncOptions({gh, gw}));
  return projector(pooled).flatten(2).transpose(1, 2);
}

std::pair<BlendedTokens, torch::Tensor> blend(const std::vector<torch::Tensor>& projected,
                                              std::pair<int64_t, int64_t> grid, const torch::Tensor& w_q,
                                              const torch::Tensor& w_k, const torch::Tensor& w_v) {
  if (projected.size() != static_cast<size_t>(kNumStages)) {
    throw ShapeError("blend needs 4 projected stages, got " + std::to_string(projected.size()));
  }
  for (const auto& p : projected) {
    if (p.dim() != 3 || p.sizes() != projected[0].sizes()) {
      throw ShapeError("projected stage token sets disagree in shape");
    }
  }
  if (projected[0].size(2) != w_q.size(1)) throw ShapeError("token width does not match attention weights");

  BlendedTokens out;
  out.grid_h = grid.first;
  out.grid_w = grid.second;
  int64_t begin = 0;
  for (const auto& p : projected) {
    out.stage_slices.emplace_back(begin, begin + p.size(1));
    begin += p.size(1);
  }
  auto attended = self_attention(torch::cat(projected, 1), w_q, w_k, w_v);
  out.tokens = attended.output;
  return {std::move(out), attended.attention};
}

namespace {

// (N_target, gh*gw) matrix that bilinearly resamples a (gh, gw) grid to (th, tw).
torch::Tensor interpolation_matrix(std::pair<int64_t, int64_t> grid, int64_t th, int64_t tw) {
  const auto n = grid.first * grid.second;
  auto basis = torch::eye(n).reshape({n, 1, grid.first, grid.second});
  auto resized = F::interpolate(basis, F::InterpolateFuncOptions()
                                           .size(std::vector<int64_t>{th, tw})
                                           .mode(torch::kBilinear)
                                           .align_corners(false));
  return resized.reshape({n, th * tw}).t().contiguous();
}

}  // namespace

StageAlignerImpl::StageAlignerImpl(int64_t d, std::pair<int64_t, int64_t> grid, StageShape target)
    : d_(d), grid_(grid), target_(std::move(target)) {
  if (target_.layout == Layout::kSpatial) {
    channel_map = register_module("channel_map", nn::Conv2d(nn::Conv2dOptions(d, target_.channels(), 1)));
  } else {
    const auto n = grid.first * grid.second;
    token_map = register_module("token_map", nn::Linear(nn::LinearOptions(n, target_.dims[0]).bias(false)));
    dim_map = register_module("dim_map", nn::Linear(d, target_.dims[1]));
    torch::NoGradGuard no_grad;
    const auto side = square_side(target_.dims[0]);
    token_map->weight.copy_(interpolation_matrix(grid, side, side));
  }
}

torch::Tensor StageAlignerImpl::forward(const torch::Tensor& block) {
  const auto b = block.size(0);
  if (target_.layout == Layout::kSpatial) {
    auto spatial = block.transpose(1, 2).reshape({b, d_, grid_.first, grid_.second});
    auto y = channel_map(spatial);
    if (y.size(2) == target_.dims[1] && y.size(3) == target_.dims[2]) return y;
    return F::interpolate(y, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{target_.dims[1], target_.dims[2]})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  }
  auto mixed = token_map(block.transpose(1, 2)).transpose(1, 2);
  return dim_map(mixed);
}

void StageAlignerImpl::set_identity() {
  torch::NoGradGuard no_grad;
  if (target_.channels() != d_) throw BindingError("identity aligner needs target width == d");
  auto eye = torch::eye(d_, torch::TensorOptions().dtype(parameters()[0].scalar_type()));
  if (channel_map) {
    channel_map->weight.copy_(eye.reshape({d_, d_, 1, 1}));
    channel_map->bias.zero_();
  } else {
    if (token_map->weight.size(0) != token_map->weight.size(1)) throw BindingError("identity aligner needs equal token counts");
    token_map->weight.copy_(torch::eye(token_map->weight.size(0), eye.options()));
    dim_map->weight.copy_(eye);
    dim_map->bias.zero_();
  }
}

RegionAwareAttentionImpl::RegionAwareAttentionImpl(RaaConfig config, const StageShapes& student,
                                                   const StageShapes& teacher)
    : config_(config), student_(student), teacher_(teacher) {
  config_.validate();
  const auto grid = config_.grid();
  for (int s = 0; s < kNumStages; ++s) {
    projectors.push_back(register_module("proj" + std::to_string(s + 1),
                                         nn::Conv2d(nn::Conv2dOptions(student[s].channels(), config_.d, 1))));
  }
  w_q = register_module("w_q", nn::Linear(nn::LinearOptions(config_.d, config_.d).bias(false)));
  w_k = register_module("w_k", nn::Linear(nn::LinearOptions(config_.d, config_.d).bias(false)));
  w_v = register_module("w_v", nn::Linear(nn::LinearOptions(config_.d, config_.d).bias(false)));
  for (int s = 0; s < kNumStages; ++s) {
    aligners.push_back(register_module("align" + std::to_string(s + 1), StageAligner(config_.d, grid, teacher[s])));
  }
}

std::vector<torch::Tensor> RegionAwareAttentionImpl::project_all(const std::vector<StageFeature>& student_stages) {
  if (student_stages.size() != static_cast<size_t>(kNumStages)) {
    throw ContractError("RAA expects 4 student stages, got " + std::to_string(student_stages.size()));
  }
  const auto grid = config_.grid();
  std::vector<torch::Tensor> projected;
  for (int s = 0; s < kNumStages; ++s) {
    if (student_stages[s].shape() != student_[s]) {
      throw BindingError("student stage " + std::to_string(s + 1) + " has shape " + student_stages[s].shape().str() +
                         ", RAA was built for " + student_[s].str());
    }
    projected.push_back(patchify_and_project(student_stages[s], projectors[s], grid, config_.strict_grid));
  }
  return projected;
}

std::vector<StageFeature> RegionAwareAttentionImpl::split_and_align(const BlendedTokens& blended,
                                                                    const std::vector<StageShape>& teacher_shapes) {
  if (teacher_shapes.size() != static_cast<size_t>(kNumStages) ||
      blended.stage_slices.size() != static_cast<size_t>(kNumStages)) {
    throw BindingError("split_and_align needs 4 teacher shapes and 4 stage slices, got " +
                       std::to_string(teacher_shapes.size()) + " and " + std::to_string(blended.stage_slices.size()));
  }
  std::vector<StageFeature> out;
  for (int s = 0; s < kNumStages; ++s) {
    if (teacher_shapes[s] != teacher_[s]) {
      throw BindingError("teacher stage " + std::to_string(s + 1) + " shape " + teacher_shapes[s].str() +
                         " does not match the bound aligner " + teacher_[s].str());
    }
    const auto [begin, end] = blended.stage_slices[s];
    auto block = blended.tokens.slice(1, begin, end);
    out.push_back({aligners[s](block), teacher_[s].layout, s + 1});
  }
  return out;
}

RaaOutput RegionAwareAttentionImpl::forward(const std::vector<StageFeature>& student_stages) {
  auto projected = project_all(student_stages);
  auto [blended, attention] = blend(projected, config_.grid(), w_q->weight, w_k->weight, w_v->weight);
  RaaOutput out;
  out.aligned = split_and_align(blended, {teacher_.begin(), teacher_.end()});
  out.blended = std::move(blended);
  out.attention = attention;
  return out;
}

int64_t raa_parameter_count(const RaaConfig& config, const StageShapes& student, const StageShapes& teacher) {
  const auto d = config.d;
  const auto [gh, gw] = config.grid();
  int64_t n = 3 * d * d;
  for (int s = 0; s < kNumStages; ++s) {
    n += student[s].channels() * d + d;
    if (teacher[s].layout == Layout::kSpatial) {
      n += d * teacher[s].channels() + teacher[s].channels();
    } else {
      n += gh * gw * teacher[s].dims[0] + d * teacher[s].dims[1] + teacher[s].dims[1];
    }
  }
  return n;
}

std::vector<int64_t> patch_major_order(int64_t n_q) {
  const auto per_stage = n_q / kNumStages;
  std::vector<int64_t> order;
  order.reserve(n_q);
  for (int64_t p = 0; p < per_stage; ++p) {
    for (int64_t s = 0; s < kNumStages; ++s) order.push_back(s * per_stage + p);
  }
  return order;
}

}  // namespace pat
