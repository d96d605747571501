#ifndef CURATE_SELECTOR_HPP
#define CURATE_SELECTOR_HPP

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "curate/core.hpp"
#include "curate/random.hpp"

namespace curate {

inline constexpr std::int64_t kDefaultSelectionSize = 3350;

struct SelectionConfig {
  std::int64_t n = kDefaultSelectionSize;
  std::string score_key = "diffusion_estimator";

  bool operator==(const SelectionConfig&) const = default;
};

namespace detail {

inline double selection_score(const ImageRecord& r, const std::string& key) {
  auto it = r.scores.find(key);
  if (it == r.scores.end())
    fail(ErrorCode::MissingScoreError, "selection: image '" + r.image_id + "' has no score '" + key + "'");
  return it->second;
}

// Canonical order: score descending, then image_id ascending.
inline std::vector<ImageRecord> ranked(const std::vector<ImageRecord>& records, const std::string& key,
                                       std::size_t keep) {
  std::vector<std::pair<double, const ImageRecord*>> keyed;
  keyed.reserve(records.size());
  for (const auto& r : records) keyed.emplace_back(selection_score(r, key), &r);
  keep = std::min(keep, keyed.size());
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(keep), keyed.end(),
                    [](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return a.second->image_id < b.second->image_id;
                    });
  std::vector<ImageRecord> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) out.push_back(*keyed[i].second);
  return out;
}

inline StageReport selection_report(std::size_t in, std::size_t out, const SelectionConfig& cfg) {
  return {"select_top_n", in, out,
          {{"kind", "select"}, {"n", std::to_string(cfg.n)}, {"score_key", cfg.score_key}}};
}

}  // namespace detail

/// The n highest-scoring records (all of them if fewer), in canonical order.
inline DatasetManifest select_top_n(const std::vector<ImageRecord>& records, const SelectionConfig& cfg) {
  if (cfg.n < 1) fail(ErrorCode::ConfigError, "selection n must be >= 1");
  DatasetManifest m;
  m.records = detail::ranked(records, cfg.score_key, static_cast<std::size_t>(cfg.n));
  m.stage_log.push_back(detail::selection_report(records.size(), m.records.size(), cfg));
  return m;
}

/// One manifest per requested size, all cut from the same ranking so every
/// smaller variant is a prefix of every larger one.
inline std::vector<DatasetManifest> nested_variants(const std::vector<ImageRecord>& records,
                                                    const std::vector<std::int64_t>& sizes,
                                                    const std::string& score_key = "diffusion_estimator") {
  std::int64_t largest = 0;
  for (auto n : sizes) {
    if (n < 1) fail(ErrorCode::ConfigError, "variant sizes must be >= 1");
    largest = std::max(largest, n);
  }
  const auto ranking = detail::ranked(records, score_key, static_cast<std::size_t>(largest));
  std::vector<DatasetManifest> out;
  out.reserve(sizes.size());
  for (auto n : sizes) {
    const SelectionConfig cfg{n, score_key};
    DatasetManifest m;
    const auto keep = std::min<std::size_t>(static_cast<std::size_t>(n), ranking.size());
    m.records.assign(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(keep));
    m.stage_log.push_back(detail::selection_report(records.size(), keep, cfg));
    out.push_back(std::move(m));
  }
  return out;
}

/// Seeded uniform sample of n records without replacement (all records if
/// fewer), returned in input order. Used for size-matched control subsets.
inline std::vector<ImageRecord> sample_uniform(const std::vector<ImageRecord>& records, std::int64_t n,
                                               std::uint64_t seed) {
  if (n < 1) fail(ErrorCode::ConfigError, "sample size must be >= 1");
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(n), records.size());
  std::vector<std::size_t> idx(records.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < keep; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  std::vector<ImageRecord> out;
  out.reserve(keep);
  for (auto i : idx) out.push_back(records[i]);
  return out;
}

}  // namespace curate

#endif  // CURATE_SELECTOR_HPP
