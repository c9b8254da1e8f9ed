#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "pat/distiller.hpp"

namespace pat {

// Dense attention grid as CSV: one attention row per line, row-major,
// values printed with round-trip precision.
void write_attention_csv(const std::filesystem::path& path, const torch::Tensor& attention);
torch::Tensor read_attention_csv(const std::filesystem::path& path);

// Binary PPM heatmap with one pixel per attention entry (N x N). With
// patch_major, rows and columns are reordered from stage-major to
// patch-major query order. The digest is written as a header comment.
void write_heatmap(const std::filesystem::path& path, const torch::Tensor& attention, bool patch_major,
                   const std::string& config_digest);

struct RunSummary {
  std::filesystem::path dir;
  nlohmann::json info;  // run.json
  std::vector<MetricRecord> records;
  double final_accuracy = 0.0;  // last val record, else last train record
  std::string label() const { return info.value("label", "?"); }
  uint64_t seed() const { return info.value("seed", uint64_t{0}); }
};

// Finds every directory holding a run.json below the given roots. Throws
// DataError listing each run whose metrics file is missing, empty or
// truncated.
std::vector<RunSummary> collect_runs(const std::vector<std::filesystem::path>& roots);

// Markdown tables. Rows are sorted by label; accuracy is mean and sample std
// over seeds, printed exactly as read (percent, 2 decimals).
std::string accuracy_table(const std::vector<RunSummary>& runs);
std::string nq_table(const std::vector<RunSummary>& runs);

struct ReportFiles {
  std::vector<std::filesystem::path> written;
};

// Writes accuracy_table.md, nq_table.md, loss_curves.csv, loss_curves.svg and
// one heatmap per run that exported attention. Re-running over the same runs
// produces identical files.
ReportFiles write_report(const std::vector<std::filesystem::path>& roots, const std::filesystem::path& out_dir);

}  // namespace pat
