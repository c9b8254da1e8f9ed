#include "pat/afp.hpp"

#include <algorithm>

#include "pat/errors.hpp"

namespace pat {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

torch::Tensor resize_to(const torch::Tensor& spatial, int64_t h, int64_t w) {
  if (spatial.size(2) == h && spatial.size(3) == w) return spatial;
  return F::interpolate(spatial, F::InterpolateFuncOptions()
                                     .size(std::vector<int64_t>{h, w})
                                     .mode(torch::kBilinear)
                                     .align_corners(false));
}

void check_stage_shape(const torch::Tensor& t, const StageShape& shape, const char* what) {
  if (t.dim() != static_cast<int64_t>(shape.dims.size()) + 1 ||
      !std::equal(shape.dims.begin(), shape.dims.end(), t.sizes().begin() + 1)) {
    std::ostringstream os;
    os << what << " has shape " << t.sizes() << ", expected (B," << shape.str() << ")";
    throw ShapeError(os.str());
  }
}

}  // namespace

StageProjectorImpl::StageProjectorImpl(StageShape source, StageShape target)
    : source_(std::move(source)), target_(std::move(target)) {
  proj = register_module("proj", nn::Conv2d(nn::Conv2dOptions(source_.channels(), target_.channels(), 1)));
}

torch::Tensor StageProjectorImpl::forward(const torch::Tensor& x) {
  auto y = proj(to_spatial(x, source_.layout));
  y = resize_to(y, target_.grid_h(), target_.grid_w());
  return from_spatial(y, target_.layout);
}

void StageProjectorImpl::set_identity() {
  if (source_.channels() != target_.channels()) throw BindingError("identity projector needs equal channel counts");
  torch::NoGradGuard no_grad;
  const auto c = source_.channels();
  proj->weight.copy_(torch::eye(c, proj->weight.options()).reshape({c, c, 1, 1}));
  proj->bias.zero_();
}

int64_t stage_projector_parameter_count(const StageShape& source, const StageShape& target) {
  return source.channels() * target.channels() + target.channels();
}

FusionBlockImpl::FusionBlockImpl(StageShape shape) : shape_(std::move(shape)) {
  const auto c = shape_.channels();
  torch::NoGradGuard no_grad;
  if (shape_.layout == Layout::kSpatial) {
    conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(2 * c, c, 1)));
    conv->weight.zero_();
    conv->weight.slice(1, c, 2 * c).copy_(torch::eye(c).reshape({c, c, 1, 1}));
    conv->bias.zero_();
  } else {
    fc = register_module("fc", nn::Linear(2 * c, c));
    fc->weight.zero_();
    fc->weight.slice(1, c, 2 * c).copy_(torch::eye(c));
    fc->bias.zero_();
  }
}

torch::Tensor FusionBlockImpl::forward(const torch::Tensor& feedback, const torch::Tensor& teacher) {
  if (shape_.layout == Layout::kSpatial) return conv(torch::cat({feedback, teacher}, 1));
  return fc(torch::cat({feedback, teacher}, 2));
}

PromptBlockImpl::PromptBlockImpl(StageShape shape) : shape_(std::move(shape)) {
  const auto c = shape_.channels();
  if (shape_.layout == Layout::kSpatial) {
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(c, c, 3).padding(1)));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(c, c, 3).padding(1)));
    torch::NoGradGuard no_grad;
    conv2->weight.zero_();
    conv2->bias.zero_();
  } else {
    tconv1 = register_module("tconv1", nn::Conv1d(nn::Conv1dOptions(c, c, 3).padding(1)));
    tconv2 = register_module("tconv2", nn::Conv1d(nn::Conv1dOptions(c, c, 3).padding(1)));
    torch::NoGradGuard no_grad;
    tconv2->weight.zero_();
    tconv2->bias.zero_();
  }
}

torch::Tensor PromptBlockImpl::branch(const torch::Tensor& x) {
  if (shape_.layout == Layout::kSpatial) return conv2(F::gelu(conv1(x)));
  return tconv2(F::gelu(tconv1(x.transpose(1, 2)))).transpose(1, 2);
}

torch::Tensor PromptBlockImpl::forward(const torch::Tensor& x) { return x + branch(x); }

std::vector<torch::Tensor> PromptBlockImpl::branch_parameters() { return parameters(); }

void AfpConfig::validate() const {
  std::vector<int> seen;
  for (int s : active_stages) {
    if (s < 1 || s > kNumStages) throw ConfigError("afp.stages", "stage " + std::to_string(s) + " is outside 1..4");
    if (std::find(seen.begin(), seen.end(), s) != seen.end()) {
      throw ConfigError("afp.stages", "stage " + std::to_string(s) + " listed twice");
    }
    seen.push_back(s);
  }
}

void FeedbackBuffer::update(const std::vector<StageFeature>& clean_teacher, const std::vector<StageFeature>& raw_student) {
  if (clean_teacher.size() != static_cast<size_t>(kNumStages) || raw_student.size() != static_cast<size_t>(kNumStages)) {
    throw ContractError("feedback buffer update needs 4 teacher and 4 student stages");
  }
  for (int s = 0; s < kNumStages; ++s) {
    prev_teacher[s] = clean_teacher[s].data.detach().clone();
    prev_student[s] = raw_student[s].data.detach().clone();
  }
  initialized = true;
}

void FeedbackBuffer::reset() {
  prev_teacher = {};
  prev_student = {};
  initialized = false;
}

AdaptiveFeedbackPromptsImpl::AdaptiveFeedbackPromptsImpl(AfpConfig config, const StageShapes& teacher,
                                                         const StageShapes& student)
    : config_(std::move(config)), teacher_(teacher), student_(student) {
  config_.validate();
  fusion_.resize(kNumStages, FusionBlock(nullptr));
  prompt_.resize(kNumStages, PromptBlock(nullptr));
  projector_.resize(kNumStages, StageProjector(nullptr));
  for (int s = 1; s <= kNumStages; ++s) {
    if (!is_active(s)) continue;
    const auto tag = std::to_string(s);
    fusion_[s - 1] = register_module("fb" + tag, FusionBlock(teacher[s - 1]));
    prompt_[s - 1] = register_module("pb" + tag, PromptBlock(teacher[s - 1]));
    if (config_.use_feedback) {
      projector_[s - 1] = register_module("student_proj" + tag, StageProjector(student[s - 1], teacher[s - 1]));
    }
  }
}

bool AdaptiveFeedbackPromptsImpl::is_active(int stage) const {
  return std::find(config_.active_stages.begin(), config_.active_stages.end(), stage) != config_.active_stages.end();
}

torch::Tensor AdaptiveFeedbackPromptsImpl::compute_feedback(const FeedbackBuffer& buffer, int stage, int64_t batch,
                                                            torch::TensorOptions options) {
  if (!is_active(stage)) throw ContractError("AFP is not active at stage " + std::to_string(stage));
  const auto& shape = teacher_[stage - 1];
  if (!config_.use_feedback || !buffer.initialized) return torch::zeros(shape.with_batch(batch), options);

  const auto& prev_teacher = buffer.prev_teacher[stage - 1];
  const auto& prev_student = buffer.prev_student[stage - 1];
  check_stage_shape(prev_teacher, shape, "buffered teacher feature");
  check_stage_shape(prev_student, student_[stage - 1], "buffered student feature");
  auto diff = projector_[stage - 1](prev_student.detach()) - prev_teacher.detach();

  if (config_.mode == FeedbackMode::kBatchMean) {
    auto mean = diff.mean(0, /*keepdim=*/true);
    auto sizes = shape.with_batch(batch);
    return mean.expand(sizes);
  }
  const auto have = diff.size(0);
  if (have >= batch) return diff.slice(0, 0, batch);
  auto pad_sizes = shape.with_batch(batch - have);
  return torch::cat({diff, torch::zeros(pad_sizes, diff.options())}, 0);
}

torch::Tensor AdaptiveFeedbackPromptsImpl::afp_stage(const torch::Tensor& teacher_feature, const torch::Tensor& feedback,
                                                     int stage) {
  if (!is_active(stage)) throw ContractError("AFP is not active at stage " + std::to_string(stage));
  if (feedback.sizes() != teacher_feature.sizes()) {
    std::ostringstream os;
    os << "feedback " << feedback.sizes() << " and teacher feature " << teacher_feature.sizes()
       << " are not aligned at stage " << stage;
    throw ShapeError(os.str());
  }
  auto fused = fusion_[stage - 1](feedback, teacher_feature);
  return prompt_[stage - 1](fused);
}

AdaptedPass teacher_forward_adapted(StagedBackboneImpl& teacher, const torch::Tensor& images,
                                    AdaptiveFeedbackPromptsImpl& afp, const FeedbackBuffer& buffer) {
  for (const auto& p : teacher.parameters()) {
    if (p.requires_grad()) throw ContractError("teacher backbone must be frozen before the adapted pass");
  }
  teacher.check_input(images);
  AdaptedPass pass;
  pass.feedback.resize(kNumStages);
  auto x = teacher.stem(images);
  for (int s = 1; s <= kNumStages; ++s) {
    x = teacher.run_stage(s, x);
    if (afp.is_active(s)) {
      auto fb = afp.compute_feedback(buffer, s, x.size(0), x.options());
      x = afp.afp_stage(x, fb, s);
      pass.feedback[s - 1] = fb;
    }
    pass.stages.push_back({x, teacher.layout(), s});
  }
  pass.logits = teacher.head(x);
  return pass;
}

int64_t afp_parameter_count(const AfpConfig& config, const StageShapes& teacher, const StageShapes& student) {
  int64_t n = 0;
  for (int s : config.active_stages) {
    const auto& t = teacher[s - 1];
    const auto c = t.channels();
    n += 2 * c * c + c;  // fusion
    const int64_t taps = t.layout == Layout::kSpatial ? 9 : 3;
    n += 2 * (taps * c * c + c);  // prompt branch
    if (config.use_feedback) n += stage_projector_parameter_count(student[s - 1], t);
  }
  return n;
}

}  // namespace pat
