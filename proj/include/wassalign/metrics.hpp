#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace wassalign {

// One logged measurement. Term fields hold the *weighted* contributions as
// they entered the total, so `loss` should equal their sum up to float
// accumulation error.
struct MetricsRecord {
  std::string phase;  // e.g. "pretrain", "transfer", "target_only", "eval"
  std::int64_t epoch = 0;
  std::string split;  // e.g. "train", "val", "test"
  double loss = 0.0;
  double ce_source = 0.0;
  double ce_target = 0.0;
  double marginal_align = 0.0;
  double conditional_align = 0.0;
  double supcon = 0.0;
  std::optional<double> accuracy;
  std::optional<std::vector<double>> per_class_accuracy;
  std::int64_t cond_skipped_steps = 0;  // steps whose conditional term was skipped
  double seconds = 0.0;

  double term_sum() const {
    return ce_source + ce_target + marginal_align + conditional_align + supcon;
  }
  bool consistent(double tol = 1e-6) const;
};

std::string to_json_line(const MetricsRecord& r);
MetricsRecord record_from_json_line(const std::string& line);

// Append-only JSON-lines log. One object per line; flushed per record.
class MetricsLog {
 public:
  explicit MetricsLog(std::filesystem::path path, bool truncate = false);

  void append(const MetricsRecord& r);
  const std::filesystem::path& path() const { return path_; }

  static std::vector<MetricsRecord> read(const std::filesystem::path& path);

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

}  // namespace wassalign
