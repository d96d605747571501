#ifndef CURATE_CORE_HPP
#define CURATE_CORE_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "curate/error.hpp"
#include "curate/ndjson.hpp"

namespace curate {

/// One candidate image. Pixels are never stored; the record points at them.
struct ImageRecord {
  std::string image_id;
  std::string source_uri;
  std::int64_t width_px = 1;
  std::int64_t height_px = 1;
  std::map<std::string, double> scores;
  std::set<std::string> flags;
  std::optional<std::string> caption;

  bool operator==(const ImageRecord&) const = default;
};

/// Audit entry for one pipeline stage (the funnel row).
struct StageReport {
  std::string stage_name;
  std::uint64_t input_count = 0;
  std::uint64_t output_count = 0;
  std::map<std::string, std::string> parameters;

  bool operator==(const StageReport&) const = default;
};

struct DatasetManifest {
  std::vector<ImageRecord> records;
  std::string pipeline_config_hash;
  std::vector<StageReport> stage_log;

  bool operator==(const DatasetManifest&) const = default;
};

inline constexpr int kManifestVersion = 1;

// -- validation --------------------------------------------------------------

inline void validate(const ImageRecord& r) {
  if (r.image_id.empty()) fail(ErrorCode::InvariantError, "image_id must be non-empty");
  if (r.width_px < 1 || r.height_px < 1)
    fail(ErrorCode::InvariantError, "image " + r.image_id + ": dimensions must be >= 1");
  for (const auto& [key, value] : r.scores)
    require_finite(value, "image " + r.image_id + " score '" + key + "'");
}

inline void validate_unique_ids(const std::vector<ImageRecord>& records) {
  std::unordered_set<std::string> seen;
  seen.reserve(records.size());
  for (const auto& r : records)
    if (!seen.insert(r.image_id).second)
      fail(ErrorCode::InvariantError, "duplicate image_id '" + r.image_id + "'");
}

inline void validate(const StageReport& s) {
  if (s.output_count > s.input_count)
    fail(ErrorCode::InvariantError, "stage '" + s.stage_name + "' reports more outputs than inputs");
}

inline void validate(const DatasetManifest& m) {
  for (const auto& r : m.records) validate(r);
  validate_unique_ids(m.records);
  for (const auto& s : m.stage_log) validate(s);
}

// -- JSON mapping ------------------------------------------------------------

inline json to_json(const ImageRecord& r) {
  json scores = json::object();
  for (const auto& [k, v] : r.scores) scores[k] = v;
  json j = {{"image_id", r.image_id},
            {"source_uri", r.source_uri},
            {"width_px", r.width_px},
            {"height_px", r.height_px},
            {"scores", std::move(scores)},
            {"flags", json(std::vector<std::string>(r.flags.begin(), r.flags.end()))}};
  if (r.caption) j["caption"] = *r.caption;
  return j;
}

namespace detail {

inline const json& field(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) fail(ErrorCode::ParseError, where + ": missing field '" + key + "'");
  return *it;
}

inline std::string string_field(const json& obj, const char* key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_string()) fail(ErrorCode::ParseError, where + ": field '" + key + "' must be a string");
  return v.get<std::string>();
}

inline std::int64_t int_field(const json& obj, const char* key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_number_integer())
    fail(ErrorCode::ParseError, where + ": field '" + key + "' must be an integer");
  return v.get<std::int64_t>();
}

inline double number_field(const json& obj, const char* key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_number()) fail(ErrorCode::ParseError, where + ": field '" + key + "' must be a number");
  return v.get<double>();
}

inline std::map<std::string, double> scores_from_json(const json& obj, const std::string& where) {
  if (!obj.is_object()) fail(ErrorCode::ParseError, where + ": scores must be an object");
  std::map<std::string, double> out;
  for (const auto& [k, v] : obj.items()) {
    if (!v.is_number()) fail(ErrorCode::ParseError, where + ": score '" + k + "' must be a number");
    out[k] = require_finite(v.get<double>(), where + " score '" + k + "'");
  }
  return out;
}

}  // namespace detail

inline ImageRecord record_from_json(const json& j, const std::string& where = "record") {
  if (!j.is_object()) fail(ErrorCode::ParseError, where + ": record must be an object");
  ImageRecord r;
  r.image_id = detail::string_field(j, "image_id", where);
  const std::string at = where + " (" + r.image_id + ")";
  r.source_uri = detail::string_field(j, "source_uri", at);
  r.width_px = detail::int_field(j, "width_px", at);
  r.height_px = detail::int_field(j, "height_px", at);
  if (auto it = j.find("scores"); it != j.end()) r.scores = detail::scores_from_json(*it, at);
  if (auto it = j.find("flags"); it != j.end()) {
    if (!it->is_array()) fail(ErrorCode::ParseError, at + ": flags must be an array");
    for (const auto& f : *it) {
      if (!f.is_string()) fail(ErrorCode::ParseError, at + ": flags must be strings");
      r.flags.insert(f.get<std::string>());
    }
  }
  if (auto it = j.find("caption"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) fail(ErrorCode::ParseError, at + ": caption must be a string");
    r.caption = it->get<std::string>();
  }
  validate(r);
  return r;
}

inline json to_json(const StageReport& s) {
  json params = json::object();
  for (const auto& [k, v] : s.parameters) params[k] = v;
  return {{"stage_name", s.stage_name},
          {"input_count", s.input_count},
          {"output_count", s.output_count},
          {"parameters", std::move(params)}};
}

inline StageReport stage_report_from_json(const json& j) {
  const std::string where = "stage_log entry";
  if (!j.is_object()) fail(ErrorCode::ParseError, where + " must be an object");
  StageReport s;
  s.stage_name = detail::string_field(j, "stage_name", where);
  const auto in = detail::int_field(j, "input_count", where);
  const auto out = detail::int_field(j, "output_count", where);
  if (in < 0 || out < 0) fail(ErrorCode::InvariantError, where + ": negative count");
  s.input_count = static_cast<std::uint64_t>(in);
  s.output_count = static_cast<std::uint64_t>(out);
  if (auto it = j.find("parameters"); it != j.end()) {
    if (!it->is_object()) fail(ErrorCode::ParseError, where + ": parameters must be an object");
    for (const auto& [k, v] : it->items()) {
      if (!v.is_string()) fail(ErrorCode::ParseError, where + ": parameter values must be strings");
      s.parameters[k] = v.get<std::string>();
    }
  }
  validate(s);
  return s;
}

inline json to_json(const DatasetManifest& m) {
  json records = json::array();
  for (const auto& r : m.records) records.push_back(to_json(r));
  json log = json::array();
  for (const auto& s : m.stage_log) log.push_back(to_json(s));
  return {{"version", kManifestVersion},
          {"pipeline_config_hash", m.pipeline_config_hash},
          {"stage_log", std::move(log)},
          {"records", std::move(records)}};
}

inline DatasetManifest manifest_from_json(const json& j) {
  if (!j.is_object()) fail(ErrorCode::ParseError, "manifest must be a JSON object");
  const auto version = detail::int_field(j, "version", "manifest");
  if (version != kManifestVersion)
    fail(ErrorCode::ParseError, "unsupported manifest version " + std::to_string(version));
  DatasetManifest m;
  m.pipeline_config_hash = detail::string_field(j, "pipeline_config_hash", "manifest");
  const json& log = detail::field(j, "stage_log", "manifest");
  const json& records = detail::field(j, "records", "manifest");
  if (!log.is_array() || !records.is_array())
    fail(ErrorCode::ParseError, "manifest: stage_log and records must be arrays");
  for (const auto& s : log) m.stage_log.push_back(stage_report_from_json(s));
  std::size_t i = 0;
  for (const auto& r : records)
    m.records.push_back(record_from_json(r, "records[" + std::to_string(i++) + "]"));
  validate_unique_ids(m.records);
  return m;
}

// Keys are emitted in sorted order and doubles in shortest round-trip form,
// so equal manifests always serialize to equal bytes.
inline std::string serialize_manifest(const DatasetManifest& m) {
  return to_json(m).dump(2) + "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  return manifest_from_json(read_json_file(path));
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  validate(m);
  write_text_file(path, serialize_manifest(m));
}

// -- record streams ----------------------------------------------------------

inline std::vector<ImageRecord> load_records(const std::filesystem::path& path) {
  std::vector<ImageRecord> out;
  for_each_ndjson(path, [&](const json& j, std::size_t line) {
    out.push_back(record_from_json(j, path.filename().string() + ":" + std::to_string(line)));
  });
  validate_unique_ids(out);
  return out;
}

inline std::string serialize_records(const std::vector<ImageRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline void save_records(const std::vector<ImageRecord>& records, const std::filesystem::path& path) {
  write_text_file(path, serialize_records(records));
}

}  // namespace curate

#endif  // CURATE_CORE_HPP
