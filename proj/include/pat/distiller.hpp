#pragma once

#include <torch/torch.h>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pat/afp.hpp"
#include "pat/backbones.hpp"
#include "pat/checkpoint.hpp"
#include "pat/data.hpp"
#include "pat/losses.hpp"
#include "pat/raa.hpp"

namespace pat {

enum class Method { kPat, kKd, kFitnet, kScratch };

std::string to_string(Method method);
Method parse_method(const std::string& name);  // throws ConfigError("method")

struct OptimizerConfig {
  std::string kind = "auto";  // auto | sgd | adamw; auto picks by student family
  double lr = 0.0;            // 0 = family default (0.05 sgd, 1e-3 adamw)
  double momentum = 0.9;
  double weight_decay = -1.0;  // < 0 = family default (5e-4 sgd, 0.05 adamw)
  int64_t total_steps = 0;     // > 0 enables a cosine decay over that many steps
};

struct SessionConfig {
  Method method = Method::kPat;
  bool use_raa = true;  // PAT only; false falls back to per-stage projectors
  bool use_afp = true;  // PAT only
  LossWeights weights;
  HclConfig hcl;
  RaaConfig raa;
  AfpConfig afp;
  OptimizerConfig optimizer;
  void validate() const;
};

struct MetricRecord {
  int64_t step = 0;
  int64_t epoch = 0;
  std::string split = "train";
  double ce = 0.0;
  double kl = 0.0;
  double fd = 0.0;
  double reg = 0.0;
  double total = 0.0;
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
  int64_t extra_params = 0;
};

// Everything one forward pass of a session produces, before backward.
struct StepForward {
  LossComponents parts;
  torch::Tensor total;
  torch::Tensor student_logits;
  std::vector<StageFeature> clean_teacher;  // F^T (no grad)
  std::vector<StageFeature> raw_student;    // F^S
  std::vector<StageFeature> targets;        // F^T' (or F^T without AFP)
  std::vector<StageFeature> aligned;        // F^S' (RAA or projector output)
  std::vector<torch::Tensor> feedback;      // per stage, undefined where unused
  torch::Tensor attention;                  // RAA attention, undefined without RAA
};

// Training state for one teacher/student pair and one method. The teacher is
// frozen on construction; the trainable set is the student plus whatever
// auxiliary modules the method needs (RAA, AFP, projectors).
class DistillSession {
 public:
  // teacher may be null for Method::kScratch. `seed` drives auxiliary module
  // initialization; the student is expected to be built by the caller.
  DistillSession(StagedBackbone teacher, StagedBackbone student, SessionConfig config, uint64_t seed);

  // Loss evaluation without side effects on the buffer, step or optimizer.
  StepForward forward(const torch::Tensor& images, const torch::Tensor& labels);

  // forward -> backward -> optimizer step -> buffer update. Throws
  // NumericError naming the first non-finite loss component.
  MetricRecord train_step(const torch::Tensor& images, const torch::Tensor& labels);

  std::vector<torch::Tensor> trainable_parameters() const;
  int64_t count_extra_parameters() const;

  const SessionConfig& config() const { return config_; }
  Method method() const { return config_.method; }
  int64_t step() const { return step_; }
  StagedBackbone teacher() const { return teacher_; }
  StagedBackbone student() const { return student_; }
  RegionAwareAttention raa() const { return raa_; }
  AdaptiveFeedbackPrompts afp() const { return afp_; }
  const std::vector<StageProjector>& projectors() const { return projectors_; }
  std::vector<StageProjector>& projectors() { return projectors_; }
  FeedbackBuffer& buffer() { return buffer_; }
  const FeedbackBuffer& buffer() const { return buffer_; }
  const StepForward& last_forward() const { return last_; }

  Checkpoint to_checkpoint() const;
  void load(const Checkpoint& ckpt);

 private:
  void set_learning_rate();

  SessionConfig config_;
  StagedBackbone teacher_;
  StagedBackbone student_;
  RegionAwareAttention raa_{nullptr};
  AdaptiveFeedbackPrompts afp_{nullptr};
  std::vector<StageProjector> projectors_;
  FeedbackBuffer buffer_;
  std::unique_ptr<torch::optim::Optimizer> optimizer_;
  double base_lr_ = 0.0;
  int64_t step_ = 0;
  StepForward last_;
};

// Top-1 accuracy of predicted class ids against labels. Throws ContractError
// when empty.
double accuracy(const torch::Tensor& predictions, const torch::Tensor& labels);

// Top-1 accuracy of `model` on `dataset` in eval mode. Throws ContractError on
// an empty dataset.
double evaluate(StagedBackboneImpl& model, const Dataset& dataset, int64_t batch_size = 256);

int64_t count_extra_parameters(const DistillSession& session);

struct FitOptions {
  int64_t epochs = 1;
  int64_t batch_size = 128;
  bool augment = false;
  uint64_t seed = 0;
  int64_t start_epoch = 0;
  int64_t log_every = 1;  // train records emitted every n steps
  std::function<void(const MetricRecord&)> sink;
  // Called after each epoch with the epoch number (1-based, absolute).
  std::function<void(int64_t)> on_epoch_end;
};

// Epoch loop: shuffled batches, optional augmentation, one train_step per
// batch, a "val" record per epoch when val is non-empty. Returns the final val
// accuracy (or the last train batch accuracy without val).
double fit(DistillSession& session, const Dataset& train, const Dataset* val, const FitOptions& options);

}  // namespace pat
