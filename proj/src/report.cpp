#include "pat/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "pat/errors.hpp"
#include "pat/metrics.hpp"
#include "pat/raa.hpp"

namespace pat {

namespace fs = std::filesystem;

void write_attention_csv(const fs::path& path, const torch::Tensor& attention) {
  if (attention.dim() != 2) throw ShapeError("attention export expects an (N, N) matrix");
  auto a = attention.detach().to(torch::kFloat64).contiguous();
  const auto rows = a.size(0), cols = a.size(1);
  const auto* p = a.data_ptr<double>();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << std::setprecision(17);
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) out << (c ? "," : "") << p[r * cols + c];
    out << '\n';
  }
}

torch::Tensor read_attention_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing attention file " + path.string());
  std::vector<double> values;
  int64_t rows = 0, cols = -1;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    int64_t n = 0;
    while (std::getline(ss, cell, ',')) {
      values.push_back(std::stod(cell));
      ++n;
    }
    if (cols >= 0 && n != cols) throw DataError(path.string() + ": ragged attention row " + std::to_string(rows + 1));
    cols = n;
    ++rows;
  }
  return torch::tensor(values, torch::kFloat64).reshape({rows, std::max<int64_t>(cols, 0)});
}

namespace {

// Piecewise-linear dark-blue -> teal -> yellow ramp.
std::array<uint8_t, 3> colour(double t) {
  static const double stops[4][3] = {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {253, 231, 37}};
  t = std::clamp(t, 0.0, 1.0) * 3.0;
  const int i = std::min(2, static_cast<int>(t));
  const double f = t - i;
  std::array<uint8_t, 3> rgb{};
  for (int c = 0; c < 3; ++c) rgb[c] = static_cast<uint8_t>(std::lround(stops[i][c] + f * (stops[i + 1][c] - stops[i][c])));
  return rgb;
}

std::string fmt_pct(double x) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * x;
  return os.str();
}

struct Group {
  std::vector<double> acc;
  std::vector<const RunSummary*> runs;
};

std::map<std::string, Group> group_by_label(const std::vector<RunSummary>& runs) {
  std::map<std::string, Group> groups;
  for (const auto& r : runs) {
    groups[r.label()].acc.push_back(r.final_accuracy);
    groups[r.label()].runs.push_back(&r);
  }
  return groups;
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  const double sd = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
  return {mean, sd};
}

std::string digests(const std::vector<RunSummary>& runs) {
  std::set<std::string> ds;
  for (const auto& r : runs) ds.insert(r.info.value("config_digest", ""));
  std::string out;
  for (const auto& d : ds) out += (out.empty() ? "" : ", ") + d;
  return out;
}

}  // namespace

void write_heatmap(const fs::path& path, const torch::Tensor& attention, bool patch_major,
                   const std::string& config_digest) {
  if (attention.dim() != 2 || attention.size(0) != attention.size(1)) {
    throw ShapeError("heatmap expects a square attention matrix");
  }
  auto a = attention.detach().to(torch::kFloat64);
  const auto n = a.size(0);
  if (patch_major && n % kNumStages == 0) {
    auto order = torch::tensor(patch_major_order(n), torch::kInt64);
    a = a.index_select(0, order).index_select(1, order);
  }
  a = a.contiguous();
  const double hi = std::max(a.max().item<double>(), 1e-12);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << "P6\n# config_digest " << config_digest << "\n" << n << " " << n << "\n255\n";
  const auto* p = a.data_ptr<double>();
  for (int64_t i = 0; i < n * n; ++i) {
    auto rgb = colour(p[i] / hi);
    out.write(reinterpret_cast<const char*>(rgb.data()), 3);
  }
}

std::vector<RunSummary> collect_runs(const std::vector<fs::path>& roots) {
  std::vector<fs::path> dirs;
  for (const auto& root : roots) {
    if (!fs::exists(root)) throw DataError("run directory " + root.string() + " does not exist");
    if (fs::exists(root / "run.json")) dirs.push_back(root);
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
      if (entry.is_regular_file() && entry.path().filename() == "run.json" && entry.path().parent_path() != root) {
        dirs.push_back(entry.path().parent_path());
      }
    }
  }
  std::sort(dirs.begin(), dirs.end());
  dirs.erase(std::unique(dirs.begin(), dirs.end()), dirs.end());

  std::vector<RunSummary> runs;
  std::vector<std::string> problems;
  for (const auto& dir : dirs) {
    RunSummary run;
    run.dir = dir;
    std::ifstream in(dir / "run.json");
    run.info = nlohmann::json::parse(in);
    if (!fs::exists(dir / "metrics.jsonl")) {
      problems.push_back((dir / "metrics.jsonl").string() + " (missing)");
      continue;
    }
    auto metrics = read_metrics(dir / "metrics.jsonl");
    if (metrics.records.empty() || metrics.truncated_tail || !run.info.value("complete", false)) {
      problems.push_back(dir.string() + " (incomplete)");
      continue;
    }
    run.records = std::move(metrics.records);
    run.final_accuracy = run.records.back().accuracy;
    for (auto it = run.records.rbegin(); it != run.records.rend(); ++it) {
      if (it->split == "val") {
        run.final_accuracy = it->accuracy;
        break;
      }
    }
    runs.push_back(std::move(run));
  }
  if (!problems.empty()) {
    std::string msg = "missing or incomplete runs:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw DataError(msg);
  }
  if (runs.empty()) throw DataError("no runs found under the given directories");
  std::sort(runs.begin(), runs.end(), [](const RunSummary& a, const RunSummary& b) {
    return std::make_pair(a.label(), a.seed()) < std::make_pair(b.label(), b.seed());
  });
  return runs;
}

std::string accuracy_table(const std::vector<RunSummary>& runs) {
  std::ostringstream os;
  os << "<!-- config digests: " << digests(runs) << " -->\n";
  os << "| run | method | teacher | student | seeds | accuracy (%) | std |\n";
  os << "|---|---|---|---|---|---|---|\n";
  for (const auto& [label, g] : group_by_label(runs)) {
    const auto& info = g.runs.front()->info;
    auto [mean, sd] = mean_std(g.acc);
    os << "| " << label << " | " << info.value("method", "") << " | " << info.value("teacher", "") << " | "
       << info.value("student", "") << " | " << g.acc.size() << " | " << fmt_pct(mean) << " | " << fmt_pct(sd)
       << " |\n";
  }
  return os.str();
}

std::string nq_table(const std::vector<RunSummary>& runs) {
  struct Row {
    std::vector<double> acc;
    int64_t attention_bytes = 0;
    int64_t extra_params = 0;
  };
  std::map<int64_t, Row> rows;
  std::vector<RunSummary> used;
  for (const auto& r : runs) {
    if (r.info.value("method", "") != "pat" || !r.info.value("use_raa", false)) continue;
    auto& row = rows[r.info.value("nq", int64_t{0})];
    row.acc.push_back(r.final_accuracy);
    row.attention_bytes = r.info.value("attention_bytes", int64_t{0});
    row.extra_params = r.info.value("extra_params", int64_t{0});
    used.push_back(r);
  }
  std::ostringstream os;
  os << "<!-- config digests: " << (used.empty() ? "" : digests(used)) << " -->\n";
  os << "| N_q | attention memory (bytes/sample) | extra params | seeds | accuracy (%) | std |\n";
  os << "|---|---|---|---|---|---|\n";
  for (const auto& [nq, row] : rows) {
    auto [mean, sd] = mean_std(row.acc);
    os << "| " << nq << " | " << row.attention_bytes << " | " << row.extra_params << " | " << row.acc.size() << " | "
       << fmt_pct(mean) << " | " << fmt_pct(sd) << " |\n";
  }
  return os.str();
}

ReportFiles write_report(const std::vector<fs::path>& roots, const fs::path& out_dir) {
  auto runs = collect_runs(roots);
  fs::create_directories(out_dir);
  ReportFiles files;
  auto write_text = [&](const fs::path& name, const std::string& text) {
    std::ofstream out(out_dir / name);
    out << text;
    files.written.push_back(out_dir / name);
  };
  write_text("accuracy_table.md", accuracy_table(runs));
  write_text("nq_table.md", nq_table(runs));

  std::ostringstream csv;
  csv << "label,seed,config_digest,step,epoch,ce,kl,fd,reg,total\n";
  csv << std::setprecision(17);
  double max_total = 0.0;
  int64_t max_step = 1;
  for (const auto& r : runs) {
    for (const auto& rec : r.records) {
      if (rec.split != "train") continue;
      csv << r.label() << "," << r.seed() << "," << r.info.value("config_digest", "") << "," << rec.step << ","
          << rec.epoch << "," << rec.ce << "," << rec.kl << "," << rec.fd << "," << rec.reg << "," << rec.total << "\n";
      max_total = std::max(max_total, rec.total);
      max_step = std::max(max_step, rec.step);
    }
  }
  write_text("loss_curves.csv", csv.str());

  // Total-loss curves, one polyline per run.
  std::ostringstream svg;
  const double width = 640, height = 360, margin = 40;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  svg << "<!-- config digests: " << digests(runs) << " -->\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  int k = 0;
  for (const auto& r : runs) {
    svg << "<polyline fill=\"none\" stroke=\"" << palette[k++ % 8] << "\" points=\"";
    for (const auto& rec : r.records) {
      if (rec.split != "train") continue;
      const double x = margin + (width - 2 * margin) * static_cast<double>(rec.step) / static_cast<double>(max_step);
      const double y = height - margin - (height - 2 * margin) * (max_total > 0 ? rec.total / max_total : 0.0);
      svg << std::fixed << std::setprecision(2) << x << "," << y << " ";
    }
    svg << "\"><title>" << r.label() << " seed " << r.seed() << "</title></polyline>\n";
  }
  svg << "<text x=\"" << margin << "\" y=\"20\" font-size=\"12\">total loss vs step</text>\n</svg>\n";
  write_text("loss_curves.svg", svg.str());

  for (const auto& r : runs) {
    if (!fs::exists(r.dir / "attention.csv")) continue;
    auto attn = read_attention_csv(r.dir / "attention.csv");
    auto name = "attention_" + r.label() + "_seed" + std::to_string(r.seed()) + ".ppm";
    write_heatmap(out_dir / name, attn, true, r.info.value("config_digest", ""));
    files.written.push_back(out_dir / name);
  }
  return files;
}

}  // namespace pat
