#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pat/distiller.hpp"

namespace pat {

// Fixed key order of one metrics line.
nlohmann::ordered_json to_json(const MetricRecord& rec, const std::string& config_digest);
MetricRecord record_from_json(const nlohmann::json& j);

// Append-only line-delimited JSON. Each record is flushed as it is written,
// so a crashed run leaves a parseable prefix.
class MetricsSink {
 public:
  MetricsSink(const std::filesystem::path& path, std::string config_digest);
  void append(const MetricRecord& rec);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::string digest_;
  std::ofstream out_;
};

struct MetricsFile {
  std::vector<MetricRecord> records;
  std::string config_digest;
  bool truncated_tail = false;  // last line was incomplete and skipped
};

// Reads every complete line; an unparseable final line is skipped and
// flagged, an unparseable line elsewhere throws DataError.
MetricsFile read_metrics(const std::filesystem::path& path);

}  // namespace pat
