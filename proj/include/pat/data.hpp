#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace pat {

struct Provenance {
  std::string source;  // "cifar10:<dir>", "synthetic", ...
  std::string digest;  // sha256 of the raw bytes, or of the generator parameters
  std::array<float, 3> mean{0.f, 0.f, 0.f};
  std::array<float, 3> std{1.f, 1.f, 1.f};
  uint64_t seed = 0;
};

struct Dataset {
  torch::Tensor images;  // (N, 3, H, W) float32, normalized
  torch::Tensor labels;  // (N,) int64
  int64_t num_classes = 0;
  std::string split;
  Provenance provenance;

  int64_t size() const { return labels.defined() ? labels.size(0) : 0; }
  Dataset select(const std::vector<int64_t>& indices) const;
};

enum class CifarVariant { kCifar10, kCifar100 };

inline constexpr int64_t kCifarSide = 32;
inline constexpr int64_t kCifarPixels = 3 * kCifarSide * kCifarSide;
int64_t cifar_record_size(CifarVariant variant);  // 3073 or 3074

struct CifarRecords {
  torch::Tensor pixels;  // (N, 3, 32, 32) uint8, channel-major R, G, B
  torch::Tensor labels;  // (N,) int64: the label byte (fine label for CIFAR-100)
  torch::Tensor coarse;  // (N,) int64, CIFAR-100 only
};

// Exact decode of a concatenation of records. `base_offset` is added to the
// byte offsets reported in DataError (used when decoding a slice of a file).
CifarRecords decode_cifar(std::span<const uint8_t> bytes, CifarVariant variant, long long base_offset = 0);
std::vector<uint8_t> encode_cifar(const CifarRecords& records, CifarVariant variant);

// Loads the binary distribution from `dir`: data_batch_{1..5}.bin /
// test_batch.bin for CIFAR-10, train.bin / test.bin for CIFAR-100 (fine
// labels). Pixels are scaled to [0,1] and normalized per channel.
Dataset load_cifar(const std::filesystem::path& dir, CifarVariant variant, const std::string& split);
std::array<float, 3> cifar_mean(CifarVariant variant);
std::array<float, 3> cifar_std(CifarVariant variant);

struct SynthSpec {
  uint64_t seed = 0;
  int64_t num_classes = 10;
  int64_t n = 1000;
  int64_t image_size = 32;
  double noise = 0.5;  // per-pixel Gaussian noise std; prototypes have unit-scale amplitude
};

// Class-conditional Gaussian blobs: every class has a fixed random blob layout
// and colour; samples add pixel noise. Labels are balanced to within one.
Dataset synth_dataset(const SynthSpec& spec);

// Stratified subsample: round(fraction * count) per class (at least one),
// chosen with `seed`, returned in ascending index order.
std::vector<int64_t> stratified_indices(const torch::Tensor& labels, int64_t num_classes, double fraction,
                                        uint64_t seed);
Dataset subset_fraction(const Dataset& dataset, double fraction, uint64_t seed);

// Random crop from a zero-padded copy plus random horizontal flip. Returns the
// input unchanged when disabled.
torch::Tensor augment_batch(const torch::Tensor& images, std::mt19937_64& rng, bool enabled, int64_t pad = 4);

// Deterministic per-epoch shuffled minibatch index lists.
std::vector<std::vector<int64_t>> epoch_batches(int64_t n, int64_t batch_size, uint64_t seed, int64_t epoch,
                                                bool drop_last = false);

std::string sha256_hex(std::span<const uint8_t> bytes);
std::string sha256_hex(const std::string& text);

}  // namespace pat
