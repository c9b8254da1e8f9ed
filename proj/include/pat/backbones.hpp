#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pat/stage.hpp"

namespace pat {

enum class Family { kCnn, kVit, kMlp };

std::string to_string(Family family);

struct BackboneSpec {
  std::string name = "tiny_cnn";  // tiny_cnn | tiny_vit | tiny_mixer
  int64_t num_classes = 10;
  int64_t image_size = 32;
};

struct StageOutputs {
  std::vector<StageFeature> stages;
  torch::Tensor logits;
};

// A classifier cut into a stem, four stages and a head. Subclasses define the
// pieces; forward_stages and the adapted teacher pass compose them.
class StagedBackboneImpl : public torch::nn::Module {
 public:
  StagedBackboneImpl(BackboneSpec spec, Family family, StageShapes shapes)
      : spec_(std::move(spec)), family_(family), stage_shapes_(std::move(shapes)) {}

  virtual torch::Tensor stem(const torch::Tensor& images) = 0;
  // stage is 1-based.
  virtual torch::Tensor run_stage(int stage, const torch::Tensor& x) = 0;
  virtual torch::Tensor head(const torch::Tensor& x) = 0;

  // Runs stem -> stage 1..4 -> head. Throws ShapeError on a bad batch.
  StageOutputs forward_stages(const torch::Tensor& images);
  torch::Tensor forward(const torch::Tensor& images) { return forward_stages(images).logits; }

  // Throws ShapeError unless images is (B>0, 3, S, S) with S the configured size.
  void check_input(const torch::Tensor& images) const;

  const BackboneSpec& spec() const { return spec_; }
  const std::string& name() const { return spec_.name; }
  Family family() const { return family_; }
  Layout layout() const { return family_ == Family::kCnn ? Layout::kSpatial : Layout::kTokens; }
  const StageShapes& stage_shapes() const { return stage_shapes_; }
  int64_t num_classes() const { return spec_.num_classes; }

  // Parameters whose name starts with "head.".
  std::vector<torch::Tensor> head_parameters() const;

 private:
  BackboneSpec spec_;
  Family family_;
  StageShapes stage_shapes_;
};

using StagedBackbone = std::shared_ptr<StagedBackboneImpl>;

// Builds a zoo model with seed-deterministic initialization. Throws ConfigError
// naming "name", "num_classes" or "image_size".
StagedBackbone build_backbone(const BackboneSpec& spec, uint64_t seed);

// Stage shapes a spec would produce, without building the model.
StageShapes expected_stage_shapes(const BackboneSpec& spec);

// Row-wise softmax(logits / tau). Throws ConfigError for tau <= 0.
torch::Tensor softmax_head(const torch::Tensor& logits, double tau);

int64_t parameter_count(const torch::nn::Module& module);

// Disables gradients on every parameter and switches to eval mode.
void freeze(torch::nn::Module& module);

}  // namespace pat
