#include "pat/metrics.hpp"

#include <cmath>

#include "pat/errors.hpp"

namespace pat {

nlohmann::ordered_json to_json(const MetricRecord& rec, const std::string& config_digest) {
  nlohmann::ordered_json j;
  j["step"] = rec.step;
  j["epoch"] = rec.epoch;
  j["split"] = rec.split;
  j["ce"] = rec.ce;
  j["kl"] = rec.kl;
  j["fd"] = rec.fd;
  j["reg"] = rec.reg;
  j["total"] = rec.total;
  if (std::isnan(rec.accuracy)) j["accuracy"] = nullptr; else j["accuracy"] = rec.accuracy;
  j["seconds"] = rec.seconds;
  j["extra_params"] = rec.extra_params;
  j["config_digest"] = config_digest;
  return j;
}

MetricRecord record_from_json(const nlohmann::json& j) {
  MetricRecord rec;
  rec.step = j.at("step").get<int64_t>();
  rec.epoch = j.at("epoch").get<int64_t>();
  rec.split = j.at("split").get<std::string>();
  rec.ce = j.at("ce").get<double>();
  rec.kl = j.at("kl").get<double>();
  rec.fd = j.at("fd").get<double>();
  rec.reg = j.at("reg").get<double>();
  rec.total = j.at("total").get<double>();
  rec.accuracy = j.at("accuracy").is_null() ? std::nan("") : j.at("accuracy").get<double>();
  rec.seconds = j.at("seconds").get<double>();
  rec.extra_params = j.at("extra_params").get<int64_t>();
  return rec;
}

MetricsSink::MetricsSink(const std::filesystem::path& path, std::string config_digest)
    : path_(path), digest_(std::move(config_digest)) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::app);
  if (!out_) throw DataError("cannot open metrics file " + path.string());
}

void MetricsSink::append(const MetricRecord& rec) {
  // dump(-1) keeps full double precision via the shortest round-trip form.
  out_ << to_json(rec, digest_).dump() << '\n';
  out_.flush();
}

MetricsFile read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing metrics file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);

  MetricsFile out;
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    try {
      auto j = nlohmann::json::parse(lines[i]);
      out.records.push_back(record_from_json(j));
      out.config_digest = j.value("config_digest", out.config_digest);
    } catch (const std::exception& e) {
      if (i + 1 == lines.size()) {
        out.truncated_tail = true;
        break;
      }
      throw DataError(path.string() + ": bad metrics line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace pat
