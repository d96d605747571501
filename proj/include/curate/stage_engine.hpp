#ifndef CURATE_STAGE_ENGINE_HPP
#define CURATE_STAGE_ENGINE_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "curate/core.hpp"
#include "curate/parallel.hpp"

namespace curate {

enum class Comparator { Greater, GreaterEqual, Less, LessEqual };
enum class OnMissing { Reject, Pass, Error };

constexpr std::string_view to_string(Comparator c) noexcept {
  switch (c) {
    case Comparator::Greater: return ">";
    case Comparator::GreaterEqual: return ">=";
    case Comparator::Less: return "<";
    case Comparator::LessEqual: return "<=";
  }
  return "?";
}

constexpr std::string_view to_string(OnMissing m) noexcept {
  switch (m) {
    case OnMissing::Reject: return "reject";
    case OnMissing::Pass: return "pass";
    case OnMissing::Error: return "error";
  }
  return "?";
}

inline Comparator parse_comparator(std::string_view s) {
  if (s == ">") return Comparator::Greater;
  if (s == ">=" || s == "≥") return Comparator::GreaterEqual;
  if (s == "<") return Comparator::Less;
  if (s == "<=" || s == "≤") return Comparator::LessEqual;
  fail(ErrorCode::ConfigError, "unknown comparator '" + std::string(s) + "'");
}

inline OnMissing parse_on_missing(std::string_view s) {
  if (s == "reject") return OnMissing::Reject;
  if (s == "pass") return OnMissing::Pass;
  if (s == "error") return OnMissing::Error;
  fail(ErrorCode::ConfigError, "unknown on_missing policy '" + std::string(s) + "'");
}

constexpr bool compare(double value, Comparator c, double threshold) noexcept {
  switch (c) {
    case Comparator::Greater: return value > threshold;
    case Comparator::GreaterEqual: return value >= threshold;
    case Comparator::Less: return value < threshold;
    case Comparator::LessEqual: return value <= threshold;
  }
  return false;
}

/// Threshold filter over one externally computed score.
struct StageConfig {
  std::string stage_name;
  std::string score_key;
  Comparator comparator = Comparator::Greater;
  double threshold = 0.0;
  OnMissing on_missing = OnMissing::Error;

  bool operator==(const StageConfig&) const = default;
};

/// Area filter: keeps images whose pixel area strictly exceeds
/// `min_area_exclusive`. `min_side` is an optional extra per-side floor
/// (0 disables it).
struct ResolutionConfig {
  std::string stage_name = "resolution";
  std::int64_t min_area_exclusive = 1024LL * 1024LL;
  std::int64_t min_side = 0;

  bool operator==(const ResolutionConfig&) const = default;
};

struct StageResult {
  std::vector<ImageRecord> survivors;
  StageReport report;
};

inline std::map<std::string, std::string> stage_parameters(const StageConfig& cfg) {
  return {{"kind", "threshold"},
          {"score_key", cfg.score_key},
          {"comparator", std::string(to_string(cfg.comparator))},
          {"threshold", format_number(cfg.threshold)},
          {"on_missing", std::string(to_string(cfg.on_missing))}};
}

inline std::map<std::string, std::string> stage_parameters(const ResolutionConfig& cfg) {
  return {{"kind", "resolution"},
          {"min_area_exclusive", std::to_string(cfg.min_area_exclusive)},
          {"min_side", std::to_string(cfg.min_side)}};
}

namespace detail {

// Evaluates keep[i] in parallel, then gathers sequentially in input order.
template <typename Keep>
std::vector<ImageRecord> filter_ordered(const std::vector<ImageRecord>& records, unsigned workers,
                                        Keep&& keep) {
  std::vector<char> mask(records.size(), 0);
  parallel_for(records.size(), workers, [&](std::size_t i) { mask[i] = keep(records[i]) ? 1 : 0; });
  std::vector<ImageRecord> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (mask[i]) out.push_back(records[i]);
  return out;
}

}  // namespace detail

inline StageResult apply_stage(const std::vector<ImageRecord>& records, const StageConfig& cfg,
                               unsigned workers = 1) {
  if (std::isnan(cfg.threshold))
    fail(ErrorCode::ConfigError, "stage '" + cfg.stage_name + "': threshold is NaN");
  auto keep = [&](const ImageRecord& r) {
    auto it = r.scores.find(cfg.score_key);
    if (it == r.scores.end()) {
      switch (cfg.on_missing) {
        case OnMissing::Pass: return true;
        case OnMissing::Reject: return false;
        case OnMissing::Error:
          fail(ErrorCode::MissingScoreError, "stage '" + cfg.stage_name + "': image '" +
                                                 r.image_id + "' has no score '" +
                                                 cfg.score_key + "'");
      }
      return false;
    }
    return compare(it->second, cfg.comparator, cfg.threshold);
  };
  StageResult result;
  result.survivors = detail::filter_ordered(records, workers, keep);
  result.report = {cfg.stage_name, records.size(), result.survivors.size(), stage_parameters(cfg)};
  return result;
}

inline StageResult resolution_stage(const std::vector<ImageRecord>& records,
                                    const ResolutionConfig& cfg = {}, unsigned workers = 1) {
  auto keep = [&](const ImageRecord& r) {
    const std::int64_t area = r.width_px * r.height_px;
    if (area <= cfg.min_area_exclusive) return false;
    return r.width_px >= cfg.min_side && r.height_px >= cfg.min_side;
  };
  StageResult result;
  result.survivors = detail::filter_ordered(records, workers, keep);
  result.report = {cfg.stage_name, records.size(), result.survivors.size(), stage_parameters(cfg)};
  return result;
}

/// Per-image scores ingested from an NDJSON file of
/// {"image_id": str, "scores": {key: number}} lines. Read-only after load.
class ScoreProvider {
 public:
  ScoreProvider() = default;
  ScoreProvider(std::string name, std::unordered_map<std::string, std::map<std::string, double>> rows)
      : name_(std::move(name)), rows_(std::move(rows)) {
    for (const auto& [id, scores] : rows_)
      for (const auto& [k, v] : scores) keys_.insert(k);
  }

  static ScoreProvider load(const std::filesystem::path& path) {
    std::unordered_map<std::string, std::map<std::string, double>> rows;
    for_each_ndjson(path, [&](const json& j, std::size_t line) {
      const std::string where = path.filename().string() + ":" + std::to_string(line);
      if (!j.is_object()) fail(ErrorCode::ParseError, where + ": expected an object");
      std::string id = detail::string_field(j, "image_id", where);
      auto scores = detail::scores_from_json(detail::field(j, "scores", where), where);
      auto& slot = rows[id];
      for (auto& [k, v] : scores) {
        if (slot.contains(k))
          fail(ErrorCode::InvariantError, where + ": duplicate score '" + k + "' for " + id);
        slot[k] = v;
      }
    });
    return ScoreProvider(path.filename().string(), std::move(rows));
  }

  const std::string& name() const noexcept { return name_; }
  const std::set<std::string>& keys() const noexcept { return keys_; }
  bool provides(const std::string& key) const { return keys_.contains(key); }

  const std::map<std::string, double>* find(const std::string& image_id) const {
    auto it = rows_.find(image_id);
    return it == rows_.end() ? nullptr : &it->second;
  }

 private:
  std::string name_;
  std::unordered_map<std::string, std::map<std::string, double>> rows_;
  std::set<std::string> keys_;
};

/// Copies provider scores into the records. Providers are applied in order
/// and a later provider overwrites an earlier value for the same key.
inline void attach_scores(std::vector<ImageRecord>& records, const std::vector<ScoreProvider>& providers) {
  for (const auto& p : providers)
    for (auto& r : records)
      if (const auto* s = p.find(r.image_id))
        for (const auto& [k, v] : *s) r.scores[k] = v;
}

}  // namespace curate

#endif  // CURATE_STAGE_ENGINE_HPP
