#ifndef CURATE_ESTIMATOR_HPP
#define CURATE_ESTIMATOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "curate/core.hpp"
#include "curate/hash.hpp"
#include "curate/parallel.hpp"

namespace curate {

/// Keyword prompt fed to the diffusion model when activations are extracted.
inline constexpr std::string_view kDefaultEstimatorPrompt =
    "complex. detailed. simple. bokeh effect. abstract. photorealistic. artistic. "
    "stylized. aesthetic. cinematic. instagram filters. color correction. midjourney. ugly. "
    "distorted. blurry. rendering. AI-generated. synthetic. high quality. low quality. "
    "pixelated. low illumination.";

inline constexpr double kDefaultEstimatorTimestep = 0.25;

inline std::string prompt_hash(std::string_view prompt) { return sha256_hex(prompt); }

/// (layer, token) index pair. Both are 1-based, matching the file formats.
struct Cell {
  int layer = 1;
  int token = 1;

  auto operator<=>(const Cell&) const = default;
};

/// One cross-attention map A_{l,m} for one image, row-major.
struct AttentionMap {
  std::string image_id;
  int layer = 1;
  int token = 1;
  int height = 1;
  int width = 1;
  std::vector<double> values;
};

/// Spatial L2 norms of every (layer, token) attention map of one image.
struct ActivationNormMatrix {
  std::string image_id;
  int layers = 0;
  int tokens = 0;
  std::vector<double> norms;  // layers * tokens, row-major by layer
  double timestep = kDefaultEstimatorTimestep;
  std::string prompt_hash;

  double at(int layer, int token) const {
    return norms[static_cast<std::size_t>(layer - 1) * tokens + static_cast<std::size_t>(token - 1)];
  }
  double& at(int layer, int token) {
    return norms[static_cast<std::size_t>(layer - 1) * tokens + static_cast<std::size_t>(token - 1)];
  }

  bool operator==(const ActivationNormMatrix&) const = default;
};

struct CalibrationSet {
  std::vector<ActivationNormMatrix> hq;
  std::vector<ActivationNormMatrix> lq;
};

/// Per-cell counts of calibration pairs in which the higher-quality image's
/// norm strictly exceeds the lower-quality image's, plus the chosen cells.
struct SeparationTable {
  int layers = 0;
  int tokens = 0;
  std::uint64_t pair_count = 0;
  std::vector<std::uint64_t> counts;  // layers * tokens, row-major
  std::vector<Cell> top_k;            // empty until select_top_k
  double timestep = kDefaultEstimatorTimestep;
  std::string prompt_hash;

  std::uint64_t at(int layer, int token) const {
    return counts[static_cast<std::size_t>(layer - 1) * tokens + static_cast<std::size_t>(token - 1)];
  }

  bool operator==(const SeparationTable&) const = default;
};

struct EstimatorConfig {
  int K = 32;
  double timestep = kDefaultEstimatorTimestep;
  std::string prompt = std::string(kDefaultEstimatorPrompt);
};

// -- step 1: activation norms -------------------------------------------------

// Frobenius norm with running rescaling, so huge or tiny values neither
// overflow nor underflow.
inline double frobenius_norm(std::span<const double> values) {
  double scale = 0.0;
  double ssq = 1.0;
  for (double v : values) {
    if (v == 0.0) continue;
    const double a = std::fabs(v);
    if (scale < a) {
      ssq = 1.0 + ssq * (scale / a) * (scale / a);
      scale = a;
    } else {
      ssq += (a / scale) * (a / scale);
    }
  }
  return scale * std::sqrt(ssq);
}

inline ActivationNormMatrix compute_norms(const std::vector<AttentionMap>& maps, int layers, int tokens,
                                          double timestep = kDefaultEstimatorTimestep,
                                          std::string prompt_hash_value = {}) {
  if (layers < 1 || tokens < 1) fail(ErrorCode::ShapeMismatch, "L and M must be >= 1");
  ActivationNormMatrix out;
  out.image_id = maps.empty() ? std::string{} : maps.front().image_id;
  out.layers = layers;
  out.tokens = tokens;
  out.timestep = timestep;
  out.prompt_hash = std::move(prompt_hash_value);
  out.norms.assign(static_cast<std::size_t>(layers) * tokens, 0.0);
  std::vector<char> filled(out.norms.size(), 0);
  for (const auto& m : maps) {
    if (m.image_id != out.image_id)
      fail(ErrorCode::ShapeMismatch, "attention maps from different images in one norm matrix");
    if (m.layer < 1 || m.layer > layers || m.token < 1 || m.token > tokens)
      fail(ErrorCode::ShapeMismatch, "attention map (" + std::to_string(m.layer) + ", " +
                                         std::to_string(m.token) + ") outside " +
                                         std::to_string(layers) + "x" + std::to_string(tokens));
    if (m.height < 1 || m.width < 1 ||
        m.values.size() != static_cast<std::size_t>(m.height) * static_cast<std::size_t>(m.width))
      fail(ErrorCode::ShapeMismatch, "attention map value count does not match h*w");
    const std::size_t idx = static_cast<std::size_t>(m.layer - 1) * tokens + (m.token - 1);
    if (filled[idx]++)
      fail(ErrorCode::DuplicateMapError, "duplicate attention map for (" + std::to_string(m.layer) +
                                             ", " + std::to_string(m.token) + ") of " + m.image_id);
    for (double v : m.values) require_finite(v, "attention value of " + m.image_id);
    out.norms[idx] = frobenius_norm(m.values);
  }
  for (std::size_t idx = 0; idx < filled.size(); ++idx)
    if (!filled[idx])
      fail(ErrorCode::MissingMapError,
           "missing attention map (" + std::to_string(idx / tokens + 1) + ", " +
               std::to_string(idx % tokens + 1) + ") for " + out.image_id);
  return out;
}

inline void validate(const ActivationNormMatrix& x) {
  if (x.layers < 1 || x.tokens < 1)
    fail(ErrorCode::ShapeMismatch, x.image_id + ": L and M must be >= 1");
  if (x.norms.size() != static_cast<std::size_t>(x.layers) * x.tokens)
    fail(ErrorCode::ShapeMismatch, x.image_id + ": norm count does not match L*M");
  for (double v : x.norms) {
    require_finite(v, "activation norm of " + x.image_id);
    if (v < 0.0) fail(ErrorCode::InvariantError, x.image_id + ": negative activation norm");
  }
  if (!(x.timestep >= 0.0 && x.timestep <= 1.0))
    fail(ErrorCode::InvariantError, x.image_id + ": timestep outside [0, 1]");
}

// -- step 2: separation scores -------------------------------------------------

inline void validate(const CalibrationSet& cal) {
  if (cal.hq.empty() || cal.lq.empty())
    fail(ErrorCode::EmptyInput, "calibration set needs at least one image in each group");
  const auto& ref = cal.hq.front();
  auto check = [&](const ActivationNormMatrix& x) {
    validate(x);
    if (x.layers != ref.layers || x.tokens != ref.tokens)
      fail(ErrorCode::ShapeMismatch, "calibration matrix " + x.image_id + " is " +
                                         std::to_string(x.layers) + "x" + std::to_string(x.tokens) +
                                         ", expected " + std::to_string(ref.layers) + "x" +
                                         std::to_string(ref.tokens));
    if (x.timestep != ref.timestep || x.prompt_hash != ref.prompt_hash)
      fail(ErrorCode::ProvenanceMismatch,
           "calibration matrix " + x.image_id + " was extracted with a different timestep or prompt");
  };
  for (const auto& x : cal.hq) check(x);
  for (const auto& x : cal.lq) check(x);
}

/// Counts, for every cell, the (hq, lq) pairs with hq norm > lq norm.
/// Per cell the LQ column is sorted once and each HQ value is located by
/// binary search, so the cost is O(L*M*(|HQ|+|LQ|) log |LQ|).
inline SeparationTable fit_separation(const CalibrationSet& cal, unsigned workers = 1) {
  validate(cal);
  const auto& ref = cal.hq.front();
  SeparationTable t;
  t.layers = ref.layers;
  t.tokens = ref.tokens;
  t.pair_count = static_cast<std::uint64_t>(cal.hq.size()) * cal.lq.size();
  t.timestep = ref.timestep;
  t.prompt_hash = ref.prompt_hash;
  const std::size_t cells = static_cast<std::size_t>(t.layers) * t.tokens;
  t.counts.assign(cells, 0);
  parallel_for(cells, workers, [&](std::size_t c) {
    std::vector<double> column(cal.lq.size());
    for (std::size_t j = 0; j < cal.lq.size(); ++j) column[j] = cal.lq[j].norms[c];
    std::sort(column.begin(), column.end());
    std::uint64_t s = 0;
    for (const auto& h : cal.hq)
      s += static_cast<std::uint64_t>(
          std::lower_bound(column.begin(), column.end(), h.norms[c]) - column.begin());
    t.counts[c] = s;
  });
  return t;
}

/// Keeps the K cells with the largest counts; ties go to the lower layer,
/// then the lower token.
inline SeparationTable select_top_k(SeparationTable table, int K) {
  const std::size_t cells = static_cast<std::size_t>(table.layers) * table.tokens;
  if (K < 1) fail(ErrorCode::ConfigError, "K must be >= 1");
  if (static_cast<std::size_t>(K) > cells)
    fail(ErrorCode::KTooLarge, "K = " + std::to_string(K) + " exceeds L*M = " + std::to_string(cells));
  if (table.counts.size() != cells) fail(ErrorCode::ShapeMismatch, "separation counts do not match L*M");
  std::vector<std::size_t> order(cells);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + K, order.end(), [&](std::size_t a, std::size_t b) {
    if (table.counts[a] != table.counts[b]) return table.counts[a] > table.counts[b];
    return a < b;
  });
  table.top_k.clear();
  for (int i = 0; i < K; ++i) {
    const auto c = order[static_cast<std::size_t>(i)];
    table.top_k.push_back({static_cast<int>(c / table.tokens) + 1, static_cast<int>(c % table.tokens) + 1});
  }
  return table;
}

inline SeparationTable fit_estimator(const CalibrationSet& cal, int K, unsigned workers = 1) {
  return select_top_k(fit_separation(cal, workers), K);
}

// -- step 3: scoring ---------------------------------------------------------

inline void check_compatible(const ActivationNormMatrix& x, const SeparationTable& table) {
  if (table.top_k.empty()) fail(ErrorCode::UnfittedError, "separation table has no top-K cells");
  if (x.layers != table.layers || x.tokens != table.tokens)
    fail(ErrorCode::ShapeMismatch, x.image_id + " is " + std::to_string(x.layers) + "x" +
                                       std::to_string(x.tokens) + ", table is " +
                                       std::to_string(table.layers) + "x" + std::to_string(table.tokens));
  if (x.norms.size() != static_cast<std::size_t>(x.layers) * x.tokens)
    fail(ErrorCode::ShapeMismatch, x.image_id + ": norm count does not match L*M");
  if (x.timestep != table.timestep || x.prompt_hash != table.prompt_hash)
    fail(ErrorCode::ProvenanceMismatch,
         x.image_id + " was extracted with a different timestep or prompt than the calibration set");
}

/// Sum of the image's norms over the selected cells, in top-K order.
inline double score_image(const ActivationNormMatrix& x, const SeparationTable& table) {
  check_compatible(x, table);
  double f = 0.0;
  for (const auto& c : table.top_k) f += x.at(c.layer, c.token);
  return f;
}

inline std::vector<std::pair<std::string, double>> score_corpus(
    const std::vector<ActivationNormMatrix>& xs, const SeparationTable& table, unsigned workers = 1) {
  std::vector<std::pair<std::string, double>> out(xs.size());
  parallel_for(xs.size(), workers, [&](std::size_t i) { out[i] = {xs[i].image_id, score_image(xs[i], table)}; });
  return out;
}

// -- providers ---------------------------------------------------------------

/// Source of per-image activation norms. The shipped implementations read
/// NDJSON files or synthesize fixtures; a live diffusion-model extractor can
/// implement the same interface.
class ActivationProvider {
 public:
  virtual ~ActivationProvider() = default;
  virtual const ActivationNormMatrix* find(const std::string& image_id) const = 0;
  virtual const std::vector<ActivationNormMatrix>& matrices() const = 0;
};

class InMemoryActivationProvider : public ActivationProvider {
 public:
  explicit InMemoryActivationProvider(std::vector<ActivationNormMatrix> xs) : xs_(std::move(xs)) {
    index_.reserve(xs_.size());
    for (std::size_t i = 0; i < xs_.size(); ++i)
      if (!index_.emplace(xs_[i].image_id, i).second)
        fail(ErrorCode::InvariantError, "duplicate activation matrix for '" + xs_[i].image_id + "'");
  }

  const ActivationNormMatrix* find(const std::string& image_id) const override {
    auto it = index_.find(image_id);
    return it == index_.end() ? nullptr : &xs_[it->second];
  }
  const std::vector<ActivationNormMatrix>& matrices() const override { return xs_; }

 private:
  std::vector<ActivationNormMatrix> xs_;
  std::unordered_map<std::string, std::size_t> index_;
};

// -- file formats ------------------------------------------------------------

inline json to_json(const ActivationNormMatrix& x) {
  json rows = json::array();
  for (int l = 1; l <= x.layers; ++l) {
    json row = json::array();
    for (int m = 1; m <= x.tokens; ++m) row.push_back(x.at(l, m));
    rows.push_back(std::move(row));
  }
  return {{"image_id", x.image_id}, {"L", x.layers},        {"M", x.tokens},
          {"timestep", x.timestep}, {"prompt_hash", x.prompt_hash}, {"norms", std::move(rows)}};
}

inline ActivationNormMatrix norm_matrix_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::ParseError, where + ": expected an object");
  ActivationNormMatrix x;
  x.image_id = detail::string_field(j, "image_id", where);
  x.layers = static_cast<int>(detail::int_field(j, "L", where));
  x.tokens = static_cast<int>(detail::int_field(j, "M", where));
  x.timestep = detail::number_field(j, "timestep", where);
  x.prompt_hash = detail::string_field(j, "prompt_hash", where);
  const json& rows = detail::field(j, "norms", where);
  if (!rows.is_array() || rows.size() != static_cast<std::size_t>(std::max(x.layers, 0)))
    fail(ErrorCode::ShapeMismatch, where + ": norms must have L rows");
  for (const auto& row : rows) {
    if (!row.is_array() || row.size() != static_cast<std::size_t>(x.tokens))
      fail(ErrorCode::ShapeMismatch, where + ": every norms row must have M entries");
    for (const auto& v : row) {
      if (!v.is_number()) fail(ErrorCode::ParseError, where + ": norms must be numbers");
      x.norms.push_back(v.get<double>());
    }
  }
  validate(x);
  return x;
}

inline std::vector<ActivationNormMatrix> load_norms(const std::filesystem::path& path) {
  std::vector<ActivationNormMatrix> out;
  for_each_ndjson(path, [&](const json& j, std::size_t line) {
    out.push_back(norm_matrix_from_json(j, path.filename().string() + ":" + std::to_string(line)));
  });
  return out;
}

inline void save_norms(const std::vector<ActivationNormMatrix>& xs, const std::filesystem::path& path) {
  std::string text;
  for (const auto& x : xs) {
    text += to_json(x).dump();
    text += '\n';
  }
  write_text_file(path, text);
}

inline AttentionMap attention_map_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::ParseError, where + ": expected an object");
  AttentionMap m;
  m.image_id = detail::string_field(j, "image_id", where);
  m.layer = static_cast<int>(detail::int_field(j, "layer", where));
  m.token = static_cast<int>(detail::int_field(j, "token", where));
  m.height = static_cast<int>(detail::int_field(j, "h", where));
  m.width = static_cast<int>(detail::int_field(j, "w", where));
  const json& values = detail::field(j, "values", where);
  if (!values.is_array()) fail(ErrorCode::ParseError, where + ": values must be an array");
  m.values.reserve(values.size());
  for (const auto& v : values) {
    if (!v.is_number()) fail(ErrorCode::ParseError, where + ": values must be numbers");
    m.values.push_back(v.get<double>());
  }
  return m;
}

/// Reads raw attention maps and reduces them to one norm matrix per image,
/// in order of first appearance.
inline std::vector<ActivationNormMatrix> load_attention_maps(const std::filesystem::path& path, int layers,
                                                             int tokens, double timestep,
                                                             const std::string& prompt_hash_value) {
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<AttentionMap>> grouped;
  for_each_ndjson(path, [&](const json& j, std::size_t line) {
    auto m = attention_map_from_json(j, path.filename().string() + ":" + std::to_string(line));
    auto [it, inserted] = grouped.try_emplace(m.image_id);
    if (inserted) order.push_back(m.image_id);
    it->second.push_back(std::move(m));
  });
  std::vector<ActivationNormMatrix> out;
  out.reserve(order.size());
  for (const auto& id : order)
    out.push_back(compute_norms(grouped[id], layers, tokens, timestep, prompt_hash_value));
  return out;
}

inline json to_json(const SeparationTable& t) {
  json s = json::array();
  for (int l = 1; l <= t.layers; ++l) {
    json row = json::array();
    for (int m = 1; m <= t.tokens; ++m) row.push_back(t.at(l, m));
    s.push_back(std::move(row));
  }
  json top = json::array();
  for (const auto& c : t.top_k) top.push_back({c.layer, c.token});
  return {{"L", t.layers},          {"M", t.tokens},
          {"pair_count", t.pair_count}, {"s", std::move(s)},
          {"top_k", std::move(top)},    {"timestep", t.timestep},
          {"prompt_hash", t.prompt_hash}};
}

inline SeparationTable separation_table_from_json(const json& j) {
  const std::string where = "separation table";
  if (!j.is_object()) fail(ErrorCode::ParseError, where + " must be an object");
  SeparationTable t;
  t.layers = static_cast<int>(detail::int_field(j, "L", where));
  t.tokens = static_cast<int>(detail::int_field(j, "M", where));
  const auto pairs = detail::int_field(j, "pair_count", where);
  if (t.layers < 1 || t.tokens < 1 || pairs < 0)
    fail(ErrorCode::ShapeMismatch, where + ": invalid L, M or pair_count");
  t.pair_count = static_cast<std::uint64_t>(pairs);
  if (auto it = j.find("timestep"); it != j.end()) t.timestep = it->get<double>();
  if (auto it = j.find("prompt_hash"); it != j.end()) t.prompt_hash = it->get<std::string>();
  const json& s = detail::field(j, "s", where);
  if (!s.is_array() || s.size() != static_cast<std::size_t>(t.layers))
    fail(ErrorCode::ShapeMismatch, where + ": s must have L rows");
  for (const auto& row : s) {
    if (!row.is_array() || row.size() != static_cast<std::size_t>(t.tokens))
      fail(ErrorCode::ShapeMismatch, where + ": every s row must have M entries");
    for (const auto& v : row) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
        fail(ErrorCode::ParseError, where + ": s entries must be non-negative integers");
      const auto c = v.get<std::uint64_t>();
      if (c > t.pair_count) fail(ErrorCode::InvariantError, where + ": s entry exceeds pair_count");
      t.counts.push_back(c);
    }
  }
  const json& top = detail::field(j, "top_k", where);
  if (!top.is_array()) fail(ErrorCode::ParseError, where + ": top_k must be an array");
  for (const auto& c : top) {
    if (!c.is_array() || c.size() != 2) fail(ErrorCode::ParseError, where + ": top_k entries are [layer, token]");
    Cell cell{c[0].get<int>(), c[1].get<int>()};
    if (cell.layer < 1 || cell.layer > t.layers || cell.token < 1 || cell.token > t.tokens)
      fail(ErrorCode::ShapeMismatch, where + ": top_k cell out of range");
    t.top_k.push_back(cell);
  }
  return t;
}

inline SeparationTable load_separation_table(const std::filesystem::path& path) {
  return separation_table_from_json(read_json_file(path));
}

inline void save_separation_table(const SeparationTable& t, const std::filesystem::path& path) {
  write_text_file(path, to_json(t).dump(2) + "\n");
}

}  // namespace curate

#endif  // CURATE_ESTIMATOR_HPP
