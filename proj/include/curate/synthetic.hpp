#ifndef CURATE_SYNTHETIC_HPP
#define CURATE_SYNTHETIC_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "curate/core.hpp"
#include "curate/dedup.hpp"
#include "curate/estimator.hpp"
#include "curate/random.hpp"

namespace curate {

// Seeded fixture generators. These are test and demo data with known ground
// truth; none of the parameters below come from measured model activations.

/// Parameters of the planted-signal activation fixture. HQ images draw their
/// planted cells from Normal(hq_mean, stddev) and every other cell from
/// Normal(base_mean, stddev); LQ images use Normal(base_mean, stddev)
/// everywhere. Negative draws are clamped to zero.
struct PlantedSpec {
  int layers = 8;
  int tokens = 16;
  int planted = 16;
  int hq = 500;
  int lq = 500;
  int test = 200;
  double hq_mean = 2.0;
  double base_mean = 1.0;
  double stddev = 0.5;
  double timestep = kDefaultEstimatorTimestep;
  std::string prompt = std::string(kDefaultEstimatorPrompt);
};

/// Parses "L=8,M=16,K=16,hq=500,lq=500,test=200" style overrides. Unknown keys
/// are a ConfigError; omitted keys keep their defaults.
inline PlantedSpec parse_planted_spec(std::string_view text) {
  PlantedSpec spec;
  auto parse_int = [](std::string_view key, std::string_view v) {
    int out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size() || out < 1)
      fail(ErrorCode::ConfigError, "planted spec: bad value for '" + std::string(key) + "'");
    return out;
  };
  auto parse_real = [](std::string_view key, std::string_view v) {
    try {
      std::size_t used = 0;
      double out = std::stod(std::string(v), &used);
      if (used != v.size()) throw std::invalid_argument("trailing");
      return out;
    } catch (const std::exception&) {
      fail(ErrorCode::ConfigError, "planted spec: bad value for '" + std::string(key) + "'");
    }
  };
  while (!text.empty()) {
    const auto comma = text.find(',');
    std::string_view item = text.substr(0, comma);
    text = comma == std::string_view::npos ? std::string_view{} : text.substr(comma + 1);
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string_view::npos) fail(ErrorCode::ConfigError, "planted spec: expected key=value");
    const auto key = item.substr(0, eq);
    const auto value = item.substr(eq + 1);
    if (key == "L") spec.layers = parse_int(key, value);
    else if (key == "M") spec.tokens = parse_int(key, value);
    else if (key == "K") spec.planted = parse_int(key, value);
    else if (key == "hq") spec.hq = parse_int(key, value);
    else if (key == "lq") spec.lq = parse_int(key, value);
    else if (key == "test") spec.test = parse_int(key, value);
    else if (key == "hq_mean") spec.hq_mean = parse_real(key, value);
    else if (key == "base_mean") spec.base_mean = parse_real(key, value);
    else if (key == "sd") spec.stddev = parse_real(key, value);
    else if (key == "t") spec.timestep = parse_real(key, value);
    else fail(ErrorCode::ConfigError, "planted spec: unknown key '" + std::string(key) + "'");
  }
  if (spec.planted > spec.layers * spec.tokens)
    fail(ErrorCode::KTooLarge, "planted spec: K exceeds L*M");
  return spec;
}

struct PlantedFixture {
  PlantedSpec spec;
  std::vector<Cell> planted;  // sorted
  CalibrationSet calibration;
  std::vector<ActivationNormMatrix> test;
  std::vector<bool> test_is_hq;
};

namespace detail {

inline std::vector<Cell> draw_cells(Rng& rng, int layers, int tokens, int k) {
  std::vector<int> idx(static_cast<std::size_t>(layers * tokens));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  for (int i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(idx.size() - static_cast<std::size_t>(i));
    std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
  }
  std::vector<Cell> cells;
  for (int i = 0; i < k; ++i) cells.push_back({idx[static_cast<std::size_t>(i)] / tokens + 1, idx[static_cast<std::size_t>(i)] % tokens + 1});
  std::sort(cells.begin(), cells.end());
  return cells;
}

inline std::vector<char> cell_mask(const std::vector<Cell>& cells, int layers, int tokens) {
  std::vector<char> mask(static_cast<std::size_t>(layers * tokens), 0);
  for (const auto& c : cells) mask[static_cast<std::size_t>((c.layer - 1) * tokens + c.token - 1)] = 1;
  return mask;
}

}  // namespace detail

inline PlantedFixture generate_planted(const PlantedSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  PlantedFixture fx;
  fx.spec = spec;
  fx.planted = detail::draw_cells(rng, spec.layers, spec.tokens, spec.planted);
  const auto mask = detail::cell_mask(fx.planted, spec.layers, spec.tokens);
  const std::string phash = prompt_hash(spec.prompt);
  auto make = [&](const std::string& id, bool hq) {
    ActivationNormMatrix x;
    x.image_id = id;
    x.layers = spec.layers;
    x.tokens = spec.tokens;
    x.timestep = spec.timestep;
    x.prompt_hash = phash;
    x.norms.resize(mask.size());
    for (std::size_t c = 0; c < mask.size(); ++c) {
      const double mean = (hq && mask[c]) ? spec.hq_mean : spec.base_mean;
      x.norms[c] = std::max(0.0, rng.normal(mean, spec.stddev));
    }
    return x;
  };
  char id[32];
  for (int i = 0; i < spec.hq; ++i) {
    std::snprintf(id, sizeof id, "hq-%05d", i);
    fx.calibration.hq.push_back(make(id, true));
  }
  for (int i = 0; i < spec.lq; ++i) {
    std::snprintf(id, sizeof id, "lq-%05d", i);
    fx.calibration.lq.push_back(make(id, false));
  }
  for (int i = 0; i < spec.test; ++i) {
    const bool hq = i < spec.test / 2;
    std::snprintf(id, sizeof id, "test-%05d", i);
    fx.test.push_back(make(id, hq));
    fx.test_is_hq.push_back(hq);
  }
  return fx;
}

// -- end-to-end corpus ---------------------------------------------------------

/// Synthetic candidate pool for exercising the whole funnel: records with
/// dimensions, externally "classified" scores, local descriptors with
/// planted near-duplicate groups, and activation norms whose planted cells
/// grow with a hidden per-image quality.
struct CorpusSpec {
  int count = 10000;
  double duplicate_fraction = 0.12;
  int descriptors_per_image = 12;
  int descriptor_dim = 8;
  double duplicate_noise = 0.02;
  int layers = 6;
  int tokens = 12;
  int planted = 8;
  int calibration_per_group = 200;
};

struct CorpusFixture {
  std::vector<ImageRecord> records;
  std::vector<json> safety_scores;   // {"image_id", "scores": {"nsfw"}}
  std::vector<json> coarse_scores;   // watermark, compression, blur, aesthetic
  std::vector<json> quality_scores;  // topiq, quality
  std::vector<DescriptorSet> descriptors;
  std::vector<ActivationNormMatrix> activations;
  CalibrationSet calibration;
  std::vector<Cell> planted;
};

namespace detail {

// Four decimals keep the generated files compact; values are still exact
// doubles once parsed back.
inline double q4(double v) { return std::round(v * 1e4) / 1e4; }

}  // namespace detail

inline CorpusFixture generate_corpus(const CorpusSpec& spec, std::uint64_t seed) {
  using detail::q4;
  Rng rng(seed);
  CorpusFixture fx;
  fx.planted = detail::draw_cells(rng, spec.layers, spec.tokens, spec.planted);
  const auto mask = detail::cell_mask(fx.planted, spec.layers, spec.tokens);
  const std::string phash = prompt_hash(kDefaultEstimatorPrompt);

  auto activations = [&](const std::string& id, double quality) {
    ActivationNormMatrix x;
    x.image_id = id;
    x.layers = spec.layers;
    x.tokens = spec.tokens;
    x.timestep = kDefaultEstimatorTimestep;
    x.prompt_hash = phash;
    x.norms.resize(mask.size());
    for (std::size_t c = 0; c < mask.size(); ++c) {
      const double mean = 1.0 + (mask[c] ? quality : 0.0);
      x.norms[c] = q4(std::max(0.0, rng.normal(mean, 0.5)));
    }
    return x;
  };

  struct Base {
    double quality;
    std::int64_t w, h;
    std::size_t descriptor_index;
  };
  std::vector<Base> bases;
  char id[32];
  for (int i = 0; i < spec.count; ++i) {
    std::snprintf(id, sizeof id, "img-%05d", i);
    const bool duplicate = !bases.empty() && rng.uniform() < spec.duplicate_fraction;
    double quality;
    std::int64_t w, h;
    DescriptorSet d;
    d.image_id = id;
    d.dim = static_cast<std::size_t>(spec.descriptor_dim);
    if (duplicate) {
      const Base& b = bases[rng.below(bases.size())];
      quality = std::clamp(b.quality + rng.normal(0.0, 0.03), 0.0, 1.0);
      w = b.w;
      h = b.h;
      for (double v : fx.descriptors[b.descriptor_index].values)
        d.values.push_back(q4(v + rng.normal(0.0, spec.duplicate_noise)));
    } else {
      quality = rng.uniform();
      w = 400 + static_cast<std::int64_t>(rng.below(2001));
      h = 400 + static_cast<std::int64_t>(rng.below(2001));
      for (int k = 0; k < spec.descriptors_per_image * spec.descriptor_dim; ++k)
        d.values.push_back(q4(rng.normal(0.0, 1.0)));
      bases.push_back({quality, w, h, fx.descriptors.size()});
    }
    fx.descriptors.push_back(std::move(d));

    ImageRecord r;
    r.image_id = id;
    r.source_uri = std::string("synthetic://pool/") + id + ".jpg";
    r.width_px = w;
    r.height_px = h;
    fx.records.push_back(r);

    const double nsfw = q4(std::pow(rng.uniform(), 4.0));
    fx.safety_scores.push_back({{"image_id", id}, {"scores", {{"nsfw", nsfw}}}});
    fx.coarse_scores.push_back(
        {{"image_id", id},
         {"scores",
          {{"watermark", q4(std::pow(rng.uniform(), 3.0))},
           {"compression", q4(std::clamp(0.6 - 0.4 * quality + rng.normal(0.0, 0.15), 0.0, 1.0))},
           {"blur", q4(std::clamp(0.5 - 0.3 * quality + rng.normal(0.0, 0.15), 0.0, 1.0))},
           {"aesthetic", q4(3.0 + 4.0 * quality + rng.normal(0.0, 0.6))}}}});
    fx.quality_scores.push_back(
        {{"image_id", id},
         {"scores",
          {{"topiq", q4(std::clamp(0.45 + 0.4 * quality + rng.normal(0.0, 0.05), 0.0, 1.0))},
           {"quality", q4(quality + rng.normal(0.0, 0.05))}}}});
    fx.activations.push_back(activations(id, quality));
  }
  for (int i = 0; i < spec.calibration_per_group; ++i) {
    std::snprintf(id, sizeof id, "cal-hq-%04d", i);
    fx.calibration.hq.push_back(activations(id, rng.uniform(0.8, 1.0)));
    std::snprintf(id, sizeof id, "cal-lq-%04d", i);
    fx.calibration.lq.push_back(activations(id, rng.uniform(0.0, 0.2)));
  }
  return fx;
}

/// File names written by write_corpus, in a fixed order.
inline const std::vector<std::string>& corpus_file_names() {
  static const std::vector<std::string> names = {
      "records.ndjson",     "scores_safety.ndjson", "scores_coarse.ndjson",
      "scores_quality.ndjson", "descriptors.ndjson", "activations.ndjson",
      "calibration_hq.ndjson", "calibration_lq.ndjson"};
  return names;
}

inline void write_corpus(const CorpusFixture& fx, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_records(fx.records, dir / "records.ndjson");
  write_text_file(dir / "scores_safety.ndjson", to_ndjson(fx.safety_scores));
  write_text_file(dir / "scores_coarse.ndjson", to_ndjson(fx.coarse_scores));
  write_text_file(dir / "scores_quality.ndjson", to_ndjson(fx.quality_scores));
  std::string desc;
  for (const auto& d : fx.descriptors) {
    desc += to_json(d).dump();
    desc += '\n';
  }
  write_text_file(dir / "descriptors.ndjson", desc);
  save_norms(fx.activations, dir / "activations.ndjson");
  save_norms(fx.calibration.hq, dir / "calibration_hq.ndjson");
  save_norms(fx.calibration.lq, dir / "calibration_lq.ndjson");
}

}  // namespace curate

#endif  // CURATE_SYNTHETIC_HPP
