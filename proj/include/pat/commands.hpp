#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "pat/config.hpp"
#include "pat/data.hpp"

namespace pat {

// Exit codes of the command-line front-end.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

struct DataSplits {
  Dataset train;
  Dataset val;
};

// Train/val sets for a config. Synthetic: one generator call split into
// train_size then val_size samples. CIFAR: the train and test files under
// the resolved data root. The fraction applies to train only.
DataSplits make_data(const ExperimentConfig& config);

// Applies "key=value" overrides in order.
void apply_overrides(ExperimentConfig& config, const std::vector<std::pair<std::string, std::string>>& overrides);

// Trains config.teacher with cross-entropy only and writes teacher.ckpt,
// metrics.jsonl, run.json and config.txt into config.output_dir. With
// resume, continues from an existing teacher.ckpt at its epoch counter.
void cmd_pretrain_teacher(const ExperimentConfig& config, bool resume, std::ostream& log);

// Runs config.session for every seed into output_dir/seed_<s>/ and writes
// output_dir/aggregate.json with the mean and sample std of final accuracy.
void cmd_distill(const ExperimentConfig& config, bool resume, std::ostream& log);

// Top-1 accuracy of a teacher or session checkpoint on the config's val split.
double cmd_eval(const ExperimentConfig& config, const std::filesystem::path& checkpoint, std::ostream& out);

void cmd_report(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out_dir,
                std::ostream& out);

}  // namespace pat
