#include "wassalign/metrics.hpp"

#include <cmath>

#include "json.hpp"
#include "wassalign/common.hpp"

namespace wassalign {

using nlohmann::json;

bool MetricsRecord::consistent(double tol) const { return std::abs(loss - term_sum()) <= tol; }

std::string to_json_line(const MetricsRecord& r) {
  json j;
  j["phase"] = r.phase;
  j["epoch"] = r.epoch;
  j["split"] = r.split;
  j["loss"] = r.loss;
  j["ce_source"] = r.ce_source;
  j["ce_target"] = r.ce_target;
  j["marginal_align"] = r.marginal_align;
  j["conditional_align"] = r.conditional_align;
  j["supcon"] = r.supcon;
  if (r.accuracy.has_value())
    j["accuracy"] = *r.accuracy;
  else
    j["accuracy"] = nullptr;
  if (r.per_class_accuracy.has_value())
    j["per_class_accuracy"] = *r.per_class_accuracy;
  else
    j["per_class_accuracy"] = nullptr;
  j["cond_skipped_steps"] = r.cond_skipped_steps;
  j["seconds"] = r.seconds;
  return j.dump();
}

MetricsRecord record_from_json_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("metrics: malformed JSON line: ") + e.what());
  }
  if (!j.is_object()) throw IoError("metrics: expected a JSON object per line");
  MetricsRecord r;
  try {
    r.phase = j.at("phase").get<std::string>();
    r.epoch = j.at("epoch").get<std::int64_t>();
    r.split = j.at("split").get<std::string>();
    r.loss = j.at("loss").get<double>();
    r.ce_source = j.at("ce_source").get<double>();
    r.ce_target = j.at("ce_target").get<double>();
    r.marginal_align = j.at("marginal_align").get<double>();
    r.conditional_align = j.at("conditional_align").get<double>();
    r.supcon = j.at("supcon").get<double>();
    if (!j.at("accuracy").is_null()) r.accuracy = j.at("accuracy").get<double>();
    if (!j.at("per_class_accuracy").is_null())
      r.per_class_accuracy = j.at("per_class_accuracy").get<std::vector<double>>();
    r.cond_skipped_steps = j.at("cond_skipped_steps").get<std::int64_t>();
    r.seconds = j.at("seconds").get<double>();
  } catch (const json::exception& e) {
    throw IoError(std::string("metrics: record field error: ") + e.what());
  }
  return r;
}

MetricsLog::MetricsLog(std::filesystem::path path, bool truncate) : path_(std::move(path)) {
  out_.open(path_, truncate ? std::ios::out | std::ios::trunc : std::ios::out | std::ios::app);
  if (!out_) throw IoError("metrics: cannot open '" + path_.string() + "' for writing");
}

void MetricsLog::append(const MetricsRecord& r) {
  out_ << to_json_line(r) << '\n';
  out_.flush();
  if (!out_) throw IoError("metrics: write to '" + path_.string() + "' failed");
}

std::vector<MetricsRecord> MetricsLog::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("metrics: cannot open '" + path.string() + "' for reading");
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(record_from_json_line(line));
  }
  return out;
}

}  // namespace wassalign
