#ifndef CURATE_DEDUP_HPP
#define CURATE_DEDUP_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "curate/core.hpp"
#include "curate/parallel.hpp"

namespace curate {

/// Local feature descriptors of one image, stored row-major.
struct DescriptorSet {
  std::string image_id;
  std::size_t dim = 1;
  std::vector<double> values;  // count() * dim entries

  std::size_t count() const noexcept { return dim == 0 ? 0 : values.size() / dim; }
  std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
};

struct DedupConfig {
  double ratio_threshold = 0.8;
  std::uint32_t min_matches = 8;
  std::string quality_key = "quality";
};

struct Cluster {
  std::set<std::string> members;
  std::string representative;

  bool operator==(const Cluster&) const = default;
};

/// Clusters partition the input ids. Ordered by smallest member id.
struct ClusterAssignment {
  std::vector<Cluster> clusters;
};

/// Disjoint-set forest with union by size and path halving.
class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n), size_(n, 1) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  bool unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (size_[a] < size_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
    return true;
  }

  std::size_t size() const noexcept { return parent_.size(); }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::size_t> size_;
};

inline void validate_dedup_config(const DedupConfig& cfg) {
  if (!(cfg.ratio_threshold > 0.0 && cfg.ratio_threshold <= 1.0))
    fail(ErrorCode::ConfigError, "dedup ratio_threshold must lie in (0, 1]");
  if (cfg.min_matches < 1) fail(ErrorCode::ConfigError, "dedup min_matches must be >= 1");
}

namespace detail {

struct Neighbor {
  std::size_t index = 0;
  double nearest = std::numeric_limits<double>::infinity();
  double second = std::numeric_limits<double>::infinity();
};

// Lowe ratio test. A zero second-nearest distance only passes when the
// nearest distance is zero as well; a missing second neighbor always passes.
inline bool passes_ratio(const Neighbor& n, double ratio) {
  if (std::isinf(n.second)) return true;
  if (n.second == 0.0) return n.nearest == 0.0;
  return n.nearest < ratio * n.second;
}

}  // namespace detail

/// Number of mutual nearest-neighbour descriptor pairs between a and b that
/// pass the ratio test in both directions. Symmetric in (a, b).
inline std::size_t match_count(const DescriptorSet& a, const DescriptorSet& b, double ratio) {
  if (a.dim != b.dim)
    fail(ErrorCode::DimensionMismatch, "descriptor dimension mismatch: " + a.image_id + " has " +
                                           std::to_string(a.dim) + ", " + b.image_id + " has " +
                                           std::to_string(b.dim));
  if (!(ratio > 0.0 && ratio <= 1.0)) fail(ErrorCode::ConfigError, "ratio must lie in (0, 1]");
  const std::size_t na = a.count();
  const std::size_t nb = b.count();
  if (na == 0 || nb == 0) return 0;

  std::vector<detail::Neighbor> best_in_b(na);
  std::vector<detail::Neighbor> best_in_a(nb);
  auto offer = [](detail::Neighbor& n, std::size_t idx, double d) {
    if (d < n.nearest) {
      n.second = n.nearest;
      n.nearest = d;
      n.index = idx;
    } else if (d < n.second) {
      n.second = d;
    }
  };
  for (std::size_t i = 0; i < na; ++i) {
    const auto ra = a.row(i);
    for (std::size_t j = 0; j < nb; ++j) {
      const auto rb = b.row(j);
      double sq = 0.0;
      for (std::size_t k = 0; k < a.dim; ++k) {
        const double diff = ra[k] - rb[k];
        sq += diff * diff;
      }
      const double d = std::sqrt(sq);
      offer(best_in_b[i], j, d);
      offer(best_in_a[j], i, d);
    }
  }
  std::size_t matches = 0;
  for (std::size_t i = 0; i < na; ++i) {
    const auto& fwd = best_in_b[i];
    const auto& back = best_in_a[fwd.index];
    if (back.index == i && detail::passes_ratio(fwd, ratio) && detail::passes_ratio(back, ratio))
      ++matches;
  }
  return matches;
}

namespace detail {

inline const std::string& pick_representative(const std::vector<std::size_t>& members,
                                              const std::vector<ImageRecord>& records,
                                              const std::string& quality_key) {
  const ImageRecord* best = nullptr;
  double best_score = 0.0;
  for (std::size_t idx : members) {
    const auto& r = records[idx];
    auto it = r.scores.find(quality_key);
    if (it == r.scores.end())
      fail(ErrorCode::MissingScoreError,
           "dedup: image '" + r.image_id + "' has no quality score '" + quality_key + "'");
    if (best == nullptr || it->second > best_score ||
        (it->second == best_score && r.image_id < best->image_id)) {
      best = &r;
      best_score = it->second;
    }
  }
  return best->image_id;
}

}  // namespace detail

/// Similarity graph (edge iff match_count >= min_matches) reduced to its
/// connected components. Records without a descriptor set have no edges.
inline ClusterAssignment cluster(const std::vector<DescriptorSet>& sets,
                                 const std::vector<ImageRecord>& records, const DedupConfig& cfg,
                                 unsigned workers = 1) {
  validate_dedup_config(cfg);
  std::unordered_map<std::string, std::size_t> index;
  index.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    if (!index.emplace(records[i].image_id, i).second)
      fail(ErrorCode::InvariantError, "duplicate image_id '" + records[i].image_id + "'");

  static const DescriptorSet kEmpty{};
  std::vector<const DescriptorSet*> by_record(records.size(), &kEmpty);
  std::vector<char> seen(records.size(), 0);
  for (const auto& s : sets) {
    auto it = index.find(s.image_id);
    if (it == index.end())
      fail(ErrorCode::MissingRecordError, "descriptor set for unknown image '" + s.image_id + "'");
    if (seen[it->second]++)
      fail(ErrorCode::InvariantError, "duplicate descriptor set for '" + s.image_id + "'");
    by_record[it->second] = &s;
  }
  std::size_t dim = 0;
  for (const auto& s : sets) {
    if (dim == 0) dim = s.dim;
    if (s.dim != dim)
      fail(ErrorCode::DimensionMismatch, "descriptor set '" + s.image_id + "' has dimension " +
                                             std::to_string(s.dim) + ", expected " +
                                             std::to_string(dim));
  }

  const std::size_t n = records.size();
  std::vector<std::vector<std::size_t>> neighbors(n);
  parallel_for(n, workers, [&](std::size_t i) {
    const auto& a = *by_record[i];
    if (a.count() < cfg.min_matches) return;
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto& b = *by_record[j];
      if (b.count() < cfg.min_matches) continue;
      if (match_count(a, b, cfg.ratio_threshold) >= cfg.min_matches) neighbors[i].push_back(j);
    }
  });

  UnionFind uf(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j : neighbors[i]) uf.unite(i, j);

  std::unordered_map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[uf.find(i)].push_back(i);

  ClusterAssignment out;
  out.clusters.reserve(groups.size());
  for (const auto& [root, members] : groups) {
    Cluster c;
    for (std::size_t idx : members) c.members.insert(records[idx].image_id);
    c.representative = detail::pick_representative(members, records, cfg.quality_key);
    out.clusters.push_back(std::move(c));
  }
  std::sort(out.clusters.begin(), out.clusters.end(),
            [](const Cluster& x, const Cluster& y) { return *x.members.begin() < *y.members.begin(); });
  return out;
}

struct DedupResult {
  std::vector<ImageRecord> survivors;  // representatives, input order
  std::vector<ImageRecord> dropped;    // flagged "duplicate", input order
  StageReport report;
  ClusterAssignment assignment;
};

inline DedupResult deduplicate(const std::vector<ImageRecord>& records,
                               const std::vector<DescriptorSet>& sets, const DedupConfig& cfg,
                               unsigned workers = 1, std::string stage_name = "dedup") {
  DedupResult result;
  result.assignment = cluster(sets, records, cfg, workers);
  std::set<std::string> keep;
  for (const auto& c : result.assignment.clusters) keep.insert(c.representative);
  for (const auto& r : records) {
    if (keep.contains(r.image_id)) {
      result.survivors.push_back(r);
    } else {
      ImageRecord d = r;
      d.flags.insert("duplicate");
      result.dropped.push_back(std::move(d));
    }
  }
  result.report.stage_name = std::move(stage_name);
  result.report.input_count = records.size();
  result.report.output_count = result.survivors.size();
  result.report.parameters = {{"kind", "dedup"},
                              {"ratio_threshold", format_number(cfg.ratio_threshold)},
                              {"min_matches", std::to_string(cfg.min_matches)},
                              {"quality_key", cfg.quality_key},
                              {"clusters", std::to_string(result.assignment.clusters.size())}};
  return result;
}

// -- descriptor ingestion ----------------------------------------------------

inline DescriptorSet descriptor_set_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::ParseError, where + ": expected an object");
  DescriptorSet s;
  s.image_id = detail::string_field(j, "image_id", where);
  const auto dim = detail::int_field(j, "dim", where);
  if (dim < 1) fail(ErrorCode::InvariantError, where + ": dim must be >= 1");
  s.dim = static_cast<std::size_t>(dim);
  const json& rows = detail::field(j, "descriptors", where);
  if (!rows.is_array()) fail(ErrorCode::ParseError, where + ": descriptors must be an array");
  s.values.reserve(rows.size() * s.dim);
  for (const auto& row : rows) {
    if (!row.is_array() || row.size() != s.dim)
      fail(ErrorCode::DimensionMismatch, where + ": descriptor length differs from dim");
    for (const auto& v : row) {
      if (!v.is_number()) fail(ErrorCode::ParseError, where + ": descriptor values must be numbers");
      s.values.push_back(require_finite(v.get<double>(), where + " descriptor value"));
    }
  }
  return s;
}

inline json to_json(const DescriptorSet& s) {
  json rows = json::array();
  for (std::size_t i = 0; i < s.count(); ++i) {
    auto r = s.row(i);
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  return {{"image_id", s.image_id}, {"dim", s.dim}, {"descriptors", std::move(rows)}};
}

inline std::vector<DescriptorSet> load_descriptors(const std::filesystem::path& path) {
  std::vector<DescriptorSet> out;
  for_each_ndjson(path, [&](const json& j, std::size_t line) {
    out.push_back(descriptor_set_from_json(j, path.filename().string() + ":" + std::to_string(line)));
  });
  return out;
}

inline json to_json(const ClusterAssignment& a) {
  json arr = json::array();
  for (const auto& c : a.clusters)
    arr.push_back({{"members", std::vector<std::string>(c.members.begin(), c.members.end())},
                   {"representative", c.representative}});
  return {{"clusters", std::move(arr)}};
}

}  // namespace curate

#endif  // CURATE_DEDUP_HPP
