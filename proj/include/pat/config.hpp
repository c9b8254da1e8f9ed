#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pat/backbones.hpp"
#include "pat/distiller.hpp"

namespace pat {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | cifar10 | cifar100
  std::string root;                  // CIFAR directory; empty = $PAT_DATA_ROOT
  double fraction = 1.0;
  bool augment = false;
  // synthetic only
  int64_t train_size = 2000;
  int64_t val_size = 500;
  double noise = 0.5;
  uint64_t data_seed = 1234;
};

struct TrainConfig {
  int64_t epochs = 10;
  int64_t batch_size = 128;
  std::vector<uint64_t> seeds{0};
  int64_t log_every = 10;
  bool cosine = true;
};

// One experiment: a flat set of dotted keys. Every artifact a run writes
// carries digest().
struct ExperimentConfig {
  BackboneSpec teacher{"tiny_cnn", 10, 32};
  std::string teacher_checkpoint;  // required by distill for methods other than scratch
  BackboneSpec student{"tiny_vit", 10, 32};
  SessionConfig session;
  DataConfig data;
  TrainConfig train;
  std::string output_dir = "runs/default";

  // Applies one key=value pair; throws ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  // Canonical "key = value" listing in fixed key order.
  std::string serialize() const;
  // Hex prefix of sha256(serialize()).
  std::string digest() const;
  void validate() const;
};

// Parses "key = value" lines; '#' starts a comment; blank lines ignored.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig config_from_text(const std::string& text);

// Resolves the CIFAR directory: data.root, else $PAT_DATA_ROOT, else "".
std::string resolve_data_root(const DataConfig& data);

std::vector<int> parse_int_list(const std::string& key, const std::string& text);

// Short name of the method/ablation a config runs, e.g. "pat", "pat-nofeedback",
// "pat-nq144", "kd". Seeds are not part of the label.
std::string run_label(const ExperimentConfig& config);

}  // namespace pat
