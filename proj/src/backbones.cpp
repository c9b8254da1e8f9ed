#include "pat/backbones.hpp"

#include <cmath>

#include "pat/errors.hpp"

namespace pat {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

std::string to_string(Family family) {
  switch (family) {
    case Family::kCnn: return "cnn";
    case Family::kVit: return "vit";
    case Family::kMlp: return "mlp";
  }
  return "?";
}

StageOutputs StagedBackboneImpl::forward_stages(const torch::Tensor& images) {
  check_input(images);
  StageOutputs out;
  auto x = stem(images);
  for (int s = 1; s <= kNumStages; ++s) {
    x = run_stage(s, x);
    out.stages.push_back({x, layout(), s});
  }
  out.logits = head(x);
  return out;
}

void StagedBackboneImpl::check_input(const torch::Tensor& images) const {
  if (!images.defined() || images.dim() != 4 || images.size(0) == 0 || images.size(1) != 3 ||
      images.size(2) != spec_.image_size || images.size(3) != spec_.image_size) {
    std::ostringstream os;
    os << name() << " expects a nonempty (B,3," << spec_.image_size << "," << spec_.image_size << ") batch, got ";
    if (images.defined()) os << images.sizes(); else os << "undefined";
    throw ShapeError(os.str());
  }
}

std::vector<torch::Tensor> StagedBackboneImpl::head_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& p : named_parameters()) {
    if (p.key().rfind("head.", 0) == 0) out.push_back(p.value());
  }
  return out;
}

namespace {

constexpr int64_t kPatch = 4;
constexpr int64_t kTokenDim = 48;
constexpr int64_t kBlocksPerStage = 2;
constexpr std::array<int64_t, 4> kCnnChannels{16, 32, 64, 128};

// conv3x3 -> GN -> ReLU -> conv3x3 -> GN, plus a strided 1x1 shortcut.
struct ResidualBlockImpl : nn::Module {
  ResidualBlockImpl(int64_t in, int64_t out) {
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(2).padding(1).bias(false)));
    norm1 = register_module("norm1", nn::GroupNorm(nn::GroupNormOptions(4, out)));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
    norm2 = register_module("norm2", nn::GroupNorm(nn::GroupNormOptions(4, out)));
    shortcut = register_module("shortcut", nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(2).bias(false)));
    shortcut_norm = register_module("shortcut_norm", nn::GroupNorm(nn::GroupNormOptions(4, out)));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::relu(norm1(conv1(x)));
    y = norm2(conv2(y));
    return torch::relu(y + shortcut_norm(shortcut(x)));
  }
  nn::Conv2d conv1{nullptr}, conv2{nullptr}, shortcut{nullptr};
  nn::GroupNorm norm1{nullptr}, norm2{nullptr}, shortcut_norm{nullptr};
};
TORCH_MODULE(ResidualBlock);

class TinyCnn : public StagedBackboneImpl {
 public:
  TinyCnn(BackboneSpec spec, StageShapes shapes) : StagedBackboneImpl(spec, Family::kCnn, std::move(shapes)) {
    int64_t in = 3;
    for (size_t i = 0; i < kCnnChannels.size(); ++i) {
      blocks_.push_back(register_module("stage" + std::to_string(i + 1), ResidualBlock(in, kCnnChannels[i])));
      in = kCnnChannels[i];
    }
    fc_ = register_module("head", nn::Linear(in, spec.num_classes));
  }
  torch::Tensor stem(const torch::Tensor& images) override { return images; }
  torch::Tensor run_stage(int stage, const torch::Tensor& x) override { return blocks_.at(stage - 1)->forward(x); }
  torch::Tensor head(const torch::Tensor& x) override { return fc_(x.mean({2, 3})); }

 private:
  std::vector<ResidualBlock> blocks_;
  nn::Linear fc_{nullptr};
};

struct PatchEmbedImpl : nn::Module {
  PatchEmbedImpl(int64_t tokens, int64_t dim) {
    proj = register_module("proj", nn::Conv2d(nn::Conv2dOptions(3, dim, kPatch).stride(kPatch)));
    pos = register_parameter("pos", torch::randn({1, tokens, dim}) * 0.02);
  }
  torch::Tensor forward(const torch::Tensor& images) { return proj(images).flatten(2).transpose(1, 2) + pos; }
  nn::Conv2d proj{nullptr};
  torch::Tensor pos;
};
TORCH_MODULE(PatchEmbed);

struct MlpImpl : nn::Module {
  MlpImpl(int64_t in, int64_t hidden) {
    fc1 = register_module("fc1", nn::Linear(in, hidden));
    fc2 = register_module("fc2", nn::Linear(hidden, in));
  }
  torch::Tensor forward(const torch::Tensor& x) { return fc2(F::gelu(fc1(x))); }
  nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Mlp);

struct EncoderBlockImpl : nn::Module {
  EncoderBlockImpl(int64_t dim, int64_t heads) : heads(heads) {
    norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
    qkv = register_module("qkv", nn::Linear(dim, 3 * dim));
    proj = register_module("proj", nn::Linear(dim, dim));
    norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
    mlp = register_module("mlp", Mlp(dim, 4 * dim));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    const auto b = x.size(0), n = x.size(1), c = x.size(2);
    auto parts = qkv(norm1(x)).reshape({b, n, 3, heads, c / heads}).permute({2, 0, 3, 1, 4});
    auto q = parts[0], k = parts[1], v = parts[2];
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(double(c / heads)), -1);
    auto y = torch::matmul(attn, v).transpose(1, 2).reshape({b, n, c});
    auto h = x + proj(y);
    return h + mlp(norm2(h));
  }
  int64_t heads;
  nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  nn::Linear qkv{nullptr}, proj{nullptr};
  Mlp mlp{nullptr};
};
TORCH_MODULE(EncoderBlock);

struct MixerBlockImpl : nn::Module {
  MixerBlockImpl(int64_t tokens, int64_t dim) {
    norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
    token_mlp = register_module("token_mlp", Mlp(tokens, tokens));
    norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
    channel_mlp = register_module("channel_mlp", Mlp(dim, 4 * dim));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto h = x + token_mlp(norm1(x).transpose(1, 2)).transpose(1, 2);
    return h + channel_mlp(norm2(h));
  }
  nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  Mlp token_mlp{nullptr}, channel_mlp{nullptr};
};
TORCH_MODULE(MixerBlock);

// Shared skeleton of the two token models: patch embedding, 2 blocks per
// stage at constant token count, LayerNorm + mean-pool head.
template <typename Block>
class TokenBackbone : public StagedBackboneImpl {
 public:
  TokenBackbone(BackboneSpec spec, Family family, StageShapes shapes, std::function<Block()> make_block)
      : StagedBackboneImpl(spec, family, shapes) {
    const auto tokens = shapes[0].dims[0];
    embed_ = register_module("embed", PatchEmbed(tokens, kTokenDim));
    for (int s = 0; s < kNumStages; ++s) {
      auto seq = nn::Sequential();
      for (int b = 0; b < kBlocksPerStage; ++b) seq->push_back(make_block());
      stages_.push_back(register_module("stage" + std::to_string(s + 1), seq));
    }
    norm_ = register_module("head_norm", nn::LayerNorm(nn::LayerNormOptions({kTokenDim})));
    fc_ = register_module("head", nn::Linear(kTokenDim, spec.num_classes));
  }
  torch::Tensor stem(const torch::Tensor& images) override { return embed_(images); }
  torch::Tensor run_stage(int stage, const torch::Tensor& x) override { return stages_.at(stage - 1)->forward(x); }
  torch::Tensor head(const torch::Tensor& x) override { return fc_(norm_(x).mean(1)); }

 private:
  PatchEmbed embed_{nullptr};
  std::vector<nn::Sequential> stages_;
  nn::LayerNorm norm_{nullptr};
  nn::Linear fc_{nullptr};
};

void validate(const BackboneSpec& spec) {
  if (spec.name != "tiny_cnn" && spec.name != "tiny_vit" && spec.name != "tiny_mixer") {
    throw ConfigError("name", "unknown backbone '" + spec.name + "' (expected tiny_cnn, tiny_vit or tiny_mixer)");
  }
  if (spec.num_classes < 2) throw ConfigError("num_classes", "must be >= 2");
  const int64_t multiple = spec.name == "tiny_cnn" ? 16 : kPatch;
  if (spec.image_size < multiple || spec.image_size % multiple != 0 || spec.image_size > 256) {
    throw ConfigError("image_size", spec.name + " needs an image size that is a multiple of " +
                                        std::to_string(multiple) + " in [" + std::to_string(multiple) +
                                        ", 256], got " + std::to_string(spec.image_size));
  }
}

}  // namespace

StageShapes expected_stage_shapes(const BackboneSpec& spec) {
  validate(spec);
  StageShapes shapes;
  if (spec.name == "tiny_cnn") {
    auto side = spec.image_size;
    for (int s = 0; s < kNumStages; ++s) {
      side /= 2;
      shapes[s] = StageShape::spatial(kCnnChannels[s], side, side);
    }
  } else {
    const auto g = spec.image_size / kPatch;
    shapes.fill(StageShape::tokens(g * g, kTokenDim));
  }
  return shapes;
}

StagedBackbone build_backbone(const BackboneSpec& spec, uint64_t seed) {
  auto shapes = expected_stage_shapes(spec);
  torch::manual_seed(seed);
  if (spec.name == "tiny_cnn") return std::make_shared<TinyCnn>(spec, shapes);
  const auto tokens = shapes[0].dims[0];
  if (spec.name == "tiny_vit") {
    return std::make_shared<TokenBackbone<EncoderBlock>>(spec, Family::kVit, shapes,
                                                         [] { return EncoderBlock(kTokenDim, 3); });
  }
  return std::make_shared<TokenBackbone<MixerBlock>>(spec, Family::kMlp, shapes,
                                                     [tokens] { return MixerBlock(tokens, kTokenDim); });
}

torch::Tensor softmax_head(const torch::Tensor& logits, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau", "temperature must be positive and finite");
  return torch::softmax(logits / tau, -1);
}

int64_t parameter_count(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

void freeze(torch::nn::Module& module) {
  for (auto& p : module.parameters()) p.set_requires_grad(false);
  module.eval();
}

}  // namespace pat
