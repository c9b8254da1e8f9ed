#include "pat/distiller.hpp"

#include <chrono>
#include <numbers>

#include "pat/errors.hpp"

namespace pat {

namespace F = torch::nn::functional;

std::string to_string(Method method) {
  switch (method) {
    case Method::kPat: return "pat";
    case Method::kKd: return "kd";
    case Method::kFitnet: return "fitnet";
    case Method::kScratch: return "scratch";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  if (name == "pat") return Method::kPat;
  if (name == "kd") return Method::kKd;
  if (name == "fitnet") return Method::kFitnet;
  if (name == "scratch") return Method::kScratch;
  throw ConfigError("method", "unknown method '" + name + "' (expected pat, kd, fitnet or scratch)");
}

void SessionConfig::validate() const {
  weights.validate();
  hcl.validate();
  if (method == Method::kPat) {
    if (!use_raa && !use_afp) {
      throw ConfigError("pat", "disabling both RAA and AFP is the FitNet baseline; request method=fitnet explicitly");
    }
    if (use_raa) raa.validate();
    if (use_afp) afp.validate();
  }
}

namespace {

torch::ScalarType dtype_of(const torch::nn::Module& m) {
  auto params = m.parameters();
  return params.empty() ? torch::kFloat32 : params.front().scalar_type();
}

std::vector<StageFeature> detached(const std::vector<StageFeature>& stages) {
  std::vector<StageFeature> out;
  for (const auto& s : stages) out.push_back({s.data.detach(), s.layout, s.stage_index});
  return out;
}

}  // namespace

DistillSession::DistillSession(StagedBackbone teacher, StagedBackbone student, SessionConfig config, uint64_t seed)
    : config_(std::move(config)), teacher_(std::move(teacher)), student_(std::move(student)) {
  config_.validate();
  if (!student_) throw ContractError("session needs a student");
  if (config_.method != Method::kScratch && !teacher_) {
    throw ContractError("method " + to_string(config_.method) + " needs a teacher");
  }
  const auto dtype = dtype_of(*student_);
  if (teacher_) {
    freeze(*teacher_);
    if (teacher_->num_classes() != student_->num_classes()) throw ConfigError("student.num_classes", "teacher and student disagree on the class count");
  }

  torch::manual_seed(seed * 7919 + 17);
  const bool pat = config_.method == Method::kPat;
  if (pat && config_.use_raa) {
    raa_ = RegionAwareAttention(config_.raa, student_->stage_shapes(), teacher_->stage_shapes());
    raa_->to(dtype);
  }
  if (pat && config_.use_afp) {
    afp_ = AdaptiveFeedbackPrompts(config_.afp, teacher_->stage_shapes(), student_->stage_shapes());
    afp_->to(dtype);
  }
  if (config_.method == Method::kFitnet || (pat && !config_.use_raa)) {
    for (int s = 0; s < kNumStages; ++s) {
      projectors_.push_back(StageProjector(student_->stage_shapes()[s], teacher_->stage_shapes()[s]));
      projectors_.back()->to(dtype);
    }
  }

  const auto& opt = config_.optimizer;
  std::string kind = opt.kind;
  if (kind == "auto") kind = student_->family() == Family::kCnn ? "sgd" : "adamw";
  if (kind == "sgd") {
    base_lr_ = opt.lr > 0 ? opt.lr : 0.05;
    const double wd = opt.weight_decay >= 0 ? opt.weight_decay : 5e-4;
    optimizer_ = std::make_unique<torch::optim::SGD>(
        trainable_parameters(), torch::optim::SGDOptions(base_lr_).momentum(opt.momentum).weight_decay(wd));
  } else if (kind == "adamw") {
    base_lr_ = opt.lr > 0 ? opt.lr : 1e-3;
    const double wd = opt.weight_decay >= 0 ? opt.weight_decay : 0.05;
    optimizer_ = std::make_unique<torch::optim::AdamW>(trainable_parameters(),
                                                       torch::optim::AdamWOptions(base_lr_).weight_decay(wd));
  } else {
    throw ConfigError("optim.kind", "unknown optimizer '" + opt.kind + "'");
  }
}

std::vector<torch::Tensor> DistillSession::trainable_parameters() const {
  auto params = student_->parameters();
  auto append = [&](const torch::nn::Module& m) {
    for (const auto& p : m.parameters()) params.push_back(p);
  };
  if (raa_) append(*raa_);
  if (afp_) append(*afp_);
  for (const auto& p : projectors_) append(*p);
  return params;
}

int64_t DistillSession::count_extra_parameters() const {
  int64_t n = 0;
  if (raa_) n += parameter_count(*raa_);
  if (afp_) n += parameter_count(*afp_);
  for (const auto& p : projectors_) n += parameter_count(*p);
  return n;
}

int64_t count_extra_parameters(const DistillSession& session) { return session.count_extra_parameters(); }

StepForward DistillSession::forward(const torch::Tensor& images, const torch::Tensor& labels) {
  StepForward out;
  const auto method = config_.method;
  const auto& w = config_.weights;

  torch::Tensor teacher_logits;
  if (method != Method::kScratch) {
    torch::NoGradGuard no_grad;
    auto clean = teacher_->forward_stages(images);
    out.clean_teacher = detached(clean.stages);
    teacher_logits = clean.logits.detach();
  }

  auto student = student_->forward_stages(images);
  out.raw_student = student.stages;
  out.student_logits = student.logits;
  out.parts.ce = F::cross_entropy(student.logits, labels);
  if (method == Method::kScratch) {
    out.total = total_loss(out.parts, w);
    return out;
  }
  out.parts.kl = kl_distill(teacher_logits, student.logits, w.tau_kd);

  if (method == Method::kFitnet) {
    torch::Tensor fd;
    for (int s = 0; s < kNumStages; ++s) {
      auto hint = projectors_[s](student.stages[s].data);
      auto term = F::mse_loss(hint, out.clean_teacher[s].data);
      fd = fd.defined() ? fd + term : term;
      out.aligned.push_back({hint, teacher_->layout(), s + 1});
    }
    out.targets = out.clean_teacher;
    out.parts.fd = fd;
  } else if (method == Method::kPat) {
    torch::Tensor adapted_logits;
    if (afp_) {
      auto adapted = teacher_forward_adapted(*teacher_, images, *afp_, buffer_);
      out.targets = adapted.stages;
      out.feedback = adapted.feedback;
      adapted_logits = adapted.logits;
    } else {
      out.targets = out.clean_teacher;
    }
    if (raa_) {
      auto blended = raa_->forward(student.stages);
      out.aligned = blended.aligned;
      out.attention = blended.attention;
    } else {
      for (int s = 0; s < kNumStages; ++s) {
        out.aligned.push_back({projectors_[s](student.stages[s].data), teacher_->layout(), s + 1});
      }
    }
    out.parts.fd = feature_distill(out.targets, out.aligned, config_.hcl);
    if (afp_) out.parts.reg = reg_loss(teacher_logits, adapted_logits, w.tau_reg);
  }
  out.total = total_loss(out.parts, w);
  return out;
}

void DistillSession::set_learning_rate() {
  const auto total = config_.optimizer.total_steps;
  if (total <= 0) return;
  const double progress = std::min(1.0, static_cast<double>(step_) / static_cast<double>(total));
  const double lr = base_lr_ * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  for (auto& group : optimizer_->param_groups()) group.options().set_lr(lr);
}

MetricRecord DistillSession::train_step(const torch::Tensor& images, const torch::Tensor& labels) {
  const auto start = std::chrono::steady_clock::now();
  student_->train();
  if (raa_) raa_->train();
  if (afp_) afp_->train();

  auto fwd = forward(images, labels);
  set_learning_rate();
  optimizer_->zero_grad();
  fwd.total.backward();
  optimizer_->step();
  if (afp_ && config_.afp.use_feedback) buffer_.update(fwd.clean_teacher, detached(fwd.raw_student));
  ++step_;

  MetricRecord rec;
  rec.step = step_;
  auto scalar = [](const torch::Tensor& t) { return t.defined() ? t.detach().to(torch::kFloat64).item<double>() : 0.0; };
  rec.ce = scalar(fwd.parts.ce);
  rec.kl = scalar(fwd.parts.kl);
  rec.fd = scalar(fwd.parts.fd);
  rec.reg = scalar(fwd.parts.reg);
  rec.total = scalar(fwd.total);
  {
    torch::NoGradGuard no_grad;
    rec.accuracy = accuracy(fwd.student_logits.argmax(1), labels);
  }
  rec.extra_params = count_extra_parameters();
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  fwd.total = fwd.total.detach();
  last_ = std::move(fwd);
  return rec;
}

Checkpoint DistillSession::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.meta["method"] = to_string(config_.method);
  ckpt.meta["student"] = student_->name();
  ckpt.meta["teacher"] = teacher_ ? teacher_->name() : "";
  ckpt.meta["step"] = step_;
  ckpt.meta["buffer_initialized"] = buffer_.initialized;
  capture_module(ckpt, "student", *student_);
  if (raa_) capture_module(ckpt, "raa", *raa_);
  if (afp_) capture_module(ckpt, "afp", *afp_);
  for (size_t i = 0; i < projectors_.size(); ++i) capture_module(ckpt, "proj" + std::to_string(i + 1), *projectors_[i]);
  if (buffer_.initialized) {
    for (int s = 0; s < kNumStages; ++s) {
      ckpt.tensors.emplace_back("buffer.teacher" + std::to_string(s + 1), buffer_.prev_teacher[s]);
      ckpt.tensors.emplace_back("buffer.student" + std::to_string(s + 1), buffer_.prev_student[s]);
    }
  }
  return ckpt;
}

void DistillSession::load(const Checkpoint& ckpt) {
  restore_module(ckpt, "student", *student_);
  if (raa_) restore_module(ckpt, "raa", *raa_);
  if (afp_) restore_module(ckpt, "afp", *afp_);
  for (size_t i = 0; i < projectors_.size(); ++i) restore_module(ckpt, "proj" + std::to_string(i + 1), *projectors_[i]);
  step_ = ckpt.meta.value("step", int64_t{0});
  buffer_.reset();
  if (ckpt.meta.value("buffer_initialized", false)) {
    for (int s = 0; s < kNumStages; ++s) {
      const auto* t = ckpt.find("buffer.teacher" + std::to_string(s + 1));
      const auto* st = ckpt.find("buffer.student" + std::to_string(s + 1));
      if (!t || !st) throw BindingError("checkpoint is missing feedback buffer stage " + std::to_string(s + 1));
      buffer_.prev_teacher[s] = t->clone();
      buffer_.prev_student[s] = st->clone();
    }
    buffer_.initialized = true;
  }
}

double accuracy(const torch::Tensor& predictions, const torch::Tensor& labels) {
  if (predictions.numel() == 0 || predictions.numel() != labels.numel()) {
    throw ContractError("accuracy needs equally sized, nonempty prediction and label sets");
  }
  return predictions.eq(labels).sum().item<double>() / static_cast<double>(labels.numel());
}

double evaluate(StagedBackboneImpl& model, const Dataset& dataset, int64_t batch_size) {
  if (dataset.size() == 0) throw ContractError("cannot evaluate on an empty dataset");
  torch::NoGradGuard no_grad;
  const bool was_training = model.is_training();
  model.eval();
  const auto dtype = dtype_of(model);
  int64_t correct = 0;
  for (int64_t begin = 0; begin < dataset.size(); begin += batch_size) {
    const auto end = std::min(dataset.size(), begin + batch_size);
    auto logits = model.forward(dataset.images.slice(0, begin, end).to(dtype));
    correct += logits.argmax(1).eq(dataset.labels.slice(0, begin, end)).sum().item<int64_t>();
  }
  model.train(was_training);
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

double fit(DistillSession& session, const Dataset& train, const Dataset* val, const FitOptions& options) {
  if (train.size() == 0) throw ContractError("cannot train on an empty dataset");
  std::mt19937_64 aug_rng(options.seed * 31 + 7);
  double last = 0.0;
  const auto dtype = dtype_of(*session.student());
  for (int64_t e = options.start_epoch; e < options.start_epoch + options.epochs; ++e) {
    const auto epoch = e + 1;
    aug_rng.seed(options.seed * 31 + 7 + static_cast<uint64_t>(epoch));
    for (const auto& idx : epoch_batches(train.size(), options.batch_size, options.seed, epoch)) {
      auto index = torch::tensor(idx, torch::kInt64);
      auto images = augment_batch(train.images.index_select(0, index), aug_rng, options.augment).to(dtype);
      auto labels = train.labels.index_select(0, index);
      auto rec = session.train_step(images, labels);
      rec.epoch = epoch;
      last = rec.accuracy;
      if (options.sink && (options.log_every <= 1 || rec.step % options.log_every == 0)) options.sink(rec);
    }
    if (val && val->size() > 0) {
      const auto start = std::chrono::steady_clock::now();
      MetricRecord rec;
      rec.step = session.step();
      rec.epoch = epoch;
      rec.split = "val";
      rec.accuracy = evaluate(*session.student(), *val);
      rec.extra_params = session.count_extra_parameters();
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      last = rec.accuracy;
      if (options.sink) options.sink(rec);
    }
    if (options.on_epoch_end) options.on_epoch_end(epoch);
  }
  return last;
}

}  // namespace pat
