#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace pat {

// On-disk layout:
//   8 bytes   magic "PATCKPT1"
//   8 bytes   header length L (little-endian uint64)
//   L bytes   JSON header: {"meta": {...}, "tensors": [{"name","dtype","shape","offset","nbytes"}]}
//   payload   raw little-endian tensor bytes, row-major, at the recorded offsets
// meta carries at least model, seed, epoch and config_digest.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  const torch::Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Appends every parameter and buffer of `module` under "<prefix>.<name>".
void capture_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module);
// Copies "<prefix>.<name>" entries back into `module`; throws BindingError on
// a missing entry or a shape mismatch.
void restore_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module);

}  // namespace pat
