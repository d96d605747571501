#ifndef CURATE_PIPELINE_HPP
#define CURATE_PIPELINE_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <toml.hpp>

#include "curate/core.hpp"
#include "curate/dedup.hpp"
#include "curate/estimator.hpp"
#include "curate/hash.hpp"
#include "curate/selector.hpp"
#include "curate/stage_engine.hpp"

namespace curate {

struct DedupStageConfig {
  std::string stage_name = "dedup";
  std::string descriptors;  // NDJSON path, relative to the data directory
  DedupConfig dedup;
};

/// Scores every surviving record with the diffusion-activation estimator.
/// The separation table is either read from `table` or fitted from the two
/// calibration files.
struct EstimatorStageConfig {
  std::string stage_name = "diffusion_estimator";
  std::string activations;
  std::string table;
  std::string calibration_hq;
  std::string calibration_lq;
  std::string score_key = "diffusion_estimator";
  EstimatorConfig estimator;
};

using StageSpec = std::variant<StageConfig, ResolutionConfig, DedupStageConfig, EstimatorStageConfig>;

enum class SelectionMode { Top, Uniform };

struct PipelineConfig {
  std::vector<StageSpec> stages;
  std::optional<SelectionConfig> selection;
  SelectionMode selection_mode = SelectionMode::Top;
  std::uint64_t seed = 0;
};

inline const std::string& stage_name(const StageSpec& s) {
  return std::visit([](const auto& c) -> const std::string& { return c.stage_name; }, s);
}

// -- canonical form and hash --------------------------------------------------

inline json canonical_json(const PipelineConfig& cfg) {
  json stages = json::array();
  for (const auto& spec : cfg.stages) {
    json j;
    if (const auto* t = std::get_if<StageConfig>(&spec)) {
      j = {{"kind", "threshold"},
           {"name", t->stage_name},
           {"score_key", t->score_key},
           {"comparator", std::string(to_string(t->comparator))},
           {"threshold", format_number(t->threshold)},
           {"on_missing", std::string(to_string(t->on_missing))}};
    } else if (const auto* r = std::get_if<ResolutionConfig>(&spec)) {
      j = {{"kind", "resolution"},
           {"name", r->stage_name},
           {"min_area_exclusive", r->min_area_exclusive},
           {"min_side", r->min_side}};
    } else if (const auto* d = std::get_if<DedupStageConfig>(&spec)) {
      j = {{"kind", "dedup"},
           {"name", d->stage_name},
           {"descriptors", d->descriptors},
           {"ratio", format_number(d->dedup.ratio_threshold)},
           {"min_matches", d->dedup.min_matches},
           {"quality_key", d->dedup.quality_key}};
    } else if (const auto* e = std::get_if<EstimatorStageConfig>(&spec)) {
      j = {{"kind", "estimator"},
           {"name", e->stage_name},
           {"activations", e->activations},
           {"table", e->table},
           {"calibration_hq", e->calibration_hq},
           {"calibration_lq", e->calibration_lq},
           {"score_key", e->score_key},
           {"k", e->estimator.K},
           {"timestep", format_number(e->estimator.timestep)},
           {"prompt_hash", prompt_hash(e->estimator.prompt)}};
    }
    stages.push_back(std::move(j));
  }
  json out = {{"stages", std::move(stages)}, {"seed", cfg.seed}};
  if (cfg.selection)
    out["selection"] = {{"n", cfg.selection->n},
                        {"score_key", cfg.selection->score_key},
                        {"mode", cfg.selection_mode == SelectionMode::Top ? "top" : "uniform"}};
  return out;
}

inline std::string config_hash(const PipelineConfig& cfg) { return sha256_hex(canonical_json(cfg).dump()); }

// -- TOML loading ------------------------------------------------------------

namespace detail {

class TomlTable {
 public:
  TomlTable(const toml::table& t, std::string where) : t_(t), where_(std::move(where)) {}

  void allow_only(std::initializer_list<std::string_view> keys) const {
    for (const auto& [k, v] : t_) {
      bool ok = false;
      for (auto allowed : keys) ok = ok || k.str() == allowed;
      if (!ok) fail(ErrorCode::ConfigError, where_ + ": unknown key '" + std::string(k.str()) + "'");
    }
  }

  bool has(std::string_view key) const { return t_.contains(key); }

  std::string str(std::string_view key, std::optional<std::string> fallback = std::nullopt) const {
    if (auto v = t_[key].value<std::string>()) return *v;
    if (t_.contains(key)) fail(ErrorCode::ConfigError, where_ + ": '" + std::string(key) + "' must be a string");
    if (fallback) return *fallback;
    fail(ErrorCode::ConfigError, where_ + ": missing '" + std::string(key) + "'");
  }

  double real(std::string_view key, std::optional<double> fallback = std::nullopt) const {
    const auto node = t_[key];
    if (node.is_floating_point()) return *node.value<double>();
    if (node.is_integer()) return static_cast<double>(*node.value<std::int64_t>());
    if (t_.contains(key)) fail(ErrorCode::ConfigError, where_ + ": '" + std::string(key) + "' must be a number");
    if (fallback) return *fallback;
    fail(ErrorCode::ConfigError, where_ + ": missing '" + std::string(key) + "'");
  }

  std::int64_t integer(std::string_view key, std::optional<std::int64_t> fallback = std::nullopt) const {
    const auto node = t_[key];
    if (node.is_integer()) return *node.value<std::int64_t>();
    if (t_.contains(key)) fail(ErrorCode::ConfigError, where_ + ": '" + std::string(key) + "' must be an integer");
    if (fallback) return *fallback;
    fail(ErrorCode::ConfigError, where_ + ": missing '" + std::string(key) + "'");
  }

 private:
  const toml::table& t_;
  std::string where_;
};

inline StageSpec stage_from_toml(const toml::table& t, std::size_t index) {
  const std::string where = "stage[" + std::to_string(index) + "]";
  TomlTable tab(t, where);
  const std::string kind = tab.str("kind", std::string("threshold"));
  const std::string name = tab.str("name");
  if (kind == "threshold") {
    tab.allow_only({"kind", "name", "score_key", "comparator", "threshold", "on_missing"});
    return StageConfig{name, tab.str("score_key"), parse_comparator(tab.str("comparator")), tab.real("threshold"),
                       parse_on_missing(tab.str("on_missing", std::string("error")))};
  }
  if (kind == "resolution") {
    tab.allow_only({"kind", "name", "min_area_exclusive", "min_side"});
    ResolutionConfig r;
    r.stage_name = name;
    r.min_area_exclusive = tab.integer("min_area_exclusive", r.min_area_exclusive);
    r.min_side = tab.integer("min_side", 0);
    if (r.min_area_exclusive < 0 || r.min_side < 0)
      fail(ErrorCode::ConfigError, where + ": resolution limits must be non-negative");
    return r;
  }
  if (kind == "dedup") {
    tab.allow_only({"kind", "name", "descriptors", "ratio", "min_matches", "quality_key"});
    DedupStageConfig d;
    d.stage_name = name;
    d.descriptors = tab.str("descriptors");
    d.dedup.ratio_threshold = tab.real("ratio", d.dedup.ratio_threshold);
    const auto mm = tab.integer("min_matches", d.dedup.min_matches);
    if (mm < 1) fail(ErrorCode::ConfigError, where + ": min_matches must be >= 1");
    d.dedup.min_matches = static_cast<std::uint32_t>(mm);
    d.dedup.quality_key = tab.str("quality_key", d.dedup.quality_key);
    validate_dedup_config(d.dedup);
    return d;
  }
  if (kind == "estimator") {
    tab.allow_only({"kind", "name", "activations", "table", "calibration_hq", "calibration_lq", "score_key", "k",
                    "timestep", "prompt"});
    EstimatorStageConfig e;
    e.stage_name = name;
    e.activations = tab.str("activations");
    e.table = tab.str("table", std::string{});
    e.calibration_hq = tab.str("calibration_hq", std::string{});
    e.calibration_lq = tab.str("calibration_lq", std::string{});
    e.score_key = tab.str("score_key", e.score_key);
    e.estimator.K = static_cast<int>(tab.integer("k", e.estimator.K));
    e.estimator.timestep = tab.real("timestep", e.estimator.timestep);
    e.estimator.prompt = tab.str("prompt", e.estimator.prompt);
    if (e.table.empty() && (e.calibration_hq.empty() || e.calibration_lq.empty()))
      fail(ErrorCode::ConfigError, where + ": estimator needs 'table' or both calibration files");
    if (e.estimator.K < 1) fail(ErrorCode::ConfigError, where + ": k must be >= 1");
    return e;
  }
  fail(ErrorCode::ConfigError, where + ": unknown stage kind '" + kind + "'");
}

}  // namespace detail

inline PipelineConfig parse_pipeline_config(const toml::table& root) {
  detail::TomlTable top(root, "config");
  top.allow_only({"seed", "stage", "selection"});
  PipelineConfig cfg;
  const auto seed = top.integer("seed", 0);
  cfg.seed = static_cast<std::uint64_t>(seed);
  if (auto* stages = root["stage"].as_array()) {
    std::size_t i = 0;
    for (auto& node : *stages) {
      auto* t = node.as_table();
      if (!t) fail(ErrorCode::ConfigError, "stage entries must be tables ([[stage]])");
      cfg.stages.push_back(detail::stage_from_toml(*t, i++));
    }
  } else if (root.contains("stage")) {
    fail(ErrorCode::ConfigError, "'stage' must be an array of tables ([[stage]])");
  }
  std::set<std::string> names;
  for (const auto& s : cfg.stages)
    if (!names.insert(stage_name(s)).second)
      fail(ErrorCode::ConfigError, "duplicate stage name '" + stage_name(s) + "'");
  if (auto* sel = root["selection"].as_table()) {
    detail::TomlTable tab(*sel, "selection");
    tab.allow_only({"n", "score_key", "mode"});
    SelectionConfig s;
    s.n = tab.integer("n", s.n);
    s.score_key = tab.str("score_key", s.score_key);
    if (s.n < 1) fail(ErrorCode::ConfigError, "selection: n must be >= 1");
    const auto mode = tab.str("mode", std::string("top"));
    if (mode == "top") cfg.selection_mode = SelectionMode::Top;
    else if (mode == "uniform") cfg.selection_mode = SelectionMode::Uniform;
    else fail(ErrorCode::ConfigError, "selection: mode must be 'top' or 'uniform'");
    cfg.selection = s;
  }
  return cfg;
}

inline PipelineConfig parse_pipeline_config_text(std::string_view text, std::string_view source = "config") {
  try {
    return parse_pipeline_config(toml::parse(text, source));
  } catch (const toml::parse_error& e) {
    fail(ErrorCode::ParseError, std::string(source) + ": " + std::string(e.description()));
  }
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  return parse_pipeline_config_text(read_text_file(path), path.string());
}

// -- stage inputs --------------------------------------------------------------

/// File-backed data needed by dedup and estimator stages, keyed by stage name.
struct PipelineInputs {
  std::map<std::string, std::vector<DescriptorSet>> descriptors;
  std::map<std::string, std::shared_ptr<const ActivationProvider>> activations;
  std::map<std::string, SeparationTable> tables;  // fitted or loaded
};

inline PipelineInputs load_pipeline_inputs(const PipelineConfig& cfg, const std::filesystem::path& data_dir,
                                           unsigned workers = 1) {
  PipelineInputs in;
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : data_dir / path;
  };
  for (const auto& spec : cfg.stages) {
    if (const auto* d = std::get_if<DedupStageConfig>(&spec)) {
      in.descriptors[d->stage_name] = load_descriptors(resolve(d->descriptors));
    } else if (const auto* e = std::get_if<EstimatorStageConfig>(&spec)) {
      in.activations[e->stage_name] =
          std::make_shared<InMemoryActivationProvider>(load_norms(resolve(e->activations)));
      if (!e->table.empty()) {
        auto t = load_separation_table(resolve(e->table));
        if (t.top_k.empty()) t = select_top_k(std::move(t), e->estimator.K);
        in.tables[e->stage_name] = std::move(t);
      } else {
        CalibrationSet cal{load_norms(resolve(e->calibration_hq)), load_norms(resolve(e->calibration_lq))};
        in.tables[e->stage_name] = fit_estimator(cal, e->estimator.K, workers);
      }
    }
  }
  return in;
}

// -- execution ---------------------------------------------------------------

namespace detail {

inline std::string format_cells(const std::vector<Cell>& cells) {
  std::string out;
  for (const auto& c : cells) {
    if (!out.empty()) out += ',';
    out += std::to_string(c.layer) + ":" + std::to_string(c.token);
  }
  return out;
}

inline StageResult run_estimator_stage(const std::vector<ImageRecord>& records, const EstimatorStageConfig& cfg,
                                       const ActivationProvider& provider, const SeparationTable& table,
                                       unsigned workers) {
  if (table.timestep != cfg.estimator.timestep || table.prompt_hash != prompt_hash(cfg.estimator.prompt))
    fail(ErrorCode::ProvenanceMismatch, "stage '" + cfg.stage_name +
                                            "': separation table was built with a different timestep or prompt");
  std::vector<ActivationNormMatrix> xs;
  xs.reserve(records.size());
  for (const auto& r : records) {
    const auto* x = provider.find(r.image_id);
    if (!x)
      fail(ErrorCode::MissingScoreError,
           "stage '" + cfg.stage_name + "': no activation norms for image '" + r.image_id + "'");
    xs.push_back(*x);
  }
  const auto scores = score_corpus(xs, table, workers);
  StageResult result;
  result.survivors = records;
  for (std::size_t i = 0; i < records.size(); ++i) result.survivors[i].scores[cfg.score_key] = scores[i].second;
  result.report = {cfg.stage_name,
                   records.size(),
                   records.size(),
                   {{"kind", "estimator"},
                    {"score_key", cfg.score_key},
                    {"k", std::to_string(table.top_k.size())},
                    {"timestep", format_number(cfg.estimator.timestep)},
                    {"prompt_hash", prompt_hash(cfg.estimator.prompt)},
                    {"pair_count", std::to_string(table.pair_count)},
                    {"top_k", format_cells(table.top_k)}}};
  return result;
}

// Every key a stage reads must come from the input records, a provider, or
// an earlier estimator stage.
inline void check_score_keys(const std::vector<ImageRecord>& records, const PipelineConfig& cfg,
                             const std::vector<ScoreProvider>& providers) {
  std::set<std::string> known;
  for (const auto& r : records)
    for (const auto& [k, v] : r.scores) known.insert(k);
  for (const auto& p : providers) known.insert(p.keys().begin(), p.keys().end());
  auto require = [&](const std::string& key, const std::string& stage) {
    if (!known.contains(key))
      fail(ErrorCode::ConfigError, "stage '" + stage + "' reads score '" + key + "' which no record or provider supplies");
  };
  for (const auto& spec : cfg.stages) {
    if (const auto* t = std::get_if<StageConfig>(&spec)) require(t->score_key, t->stage_name);
    else if (const auto* d = std::get_if<DedupStageConfig>(&spec)) require(d->dedup.quality_key, d->stage_name);
    else if (const auto* e = std::get_if<EstimatorStageConfig>(&spec)) known.insert(e->score_key);
  }
  if (cfg.selection && cfg.selection_mode == SelectionMode::Top) require(cfg.selection->score_key, "selection");
}

}  // namespace detail

/// Attaches provider scores, applies every stage in declared order and, when
/// configured, the final selection. Each step appends to the stage log.
inline DatasetManifest run_pipeline(std::vector<ImageRecord> records, const PipelineConfig& cfg,
                                    const std::vector<ScoreProvider>& providers, const PipelineInputs& inputs = {},
                                    unsigned workers = 1) {
  for (const auto& r : records) validate(r);
  validate_unique_ids(records);
  detail::check_score_keys(records, cfg, providers);
  attach_scores(records, providers);

  DatasetManifest m;
  m.pipeline_config_hash = config_hash(cfg);
  for (const auto& spec : cfg.stages) {
    StageResult step;
    if (const auto* t = std::get_if<StageConfig>(&spec)) {
      step = apply_stage(records, *t, workers);
    } else if (const auto* r = std::get_if<ResolutionConfig>(&spec)) {
      step = resolution_stage(records, *r, workers);
    } else if (const auto* d = std::get_if<DedupStageConfig>(&spec)) {
      auto it = inputs.descriptors.find(d->stage_name);
      if (it == inputs.descriptors.end())
        fail(ErrorCode::ConfigError, "stage '" + d->stage_name + "': descriptors not loaded");
      // Descriptor sets for images already filtered out are ignored.
      std::set<std::string> alive;
      for (const auto& rec : records) alive.insert(rec.image_id);
      std::vector<DescriptorSet> sets;
      for (const auto& s : it->second)
        if (alive.contains(s.image_id)) sets.push_back(s);
      auto res = deduplicate(records, sets, d->dedup, workers, d->stage_name);
      step = {std::move(res.survivors), std::move(res.report)};
    } else if (const auto* e = std::get_if<EstimatorStageConfig>(&spec)) {
      auto p = inputs.activations.find(e->stage_name);
      auto t = inputs.tables.find(e->stage_name);
      if (p == inputs.activations.end() || t == inputs.tables.end())
        fail(ErrorCode::ConfigError, "stage '" + e->stage_name + "': estimator inputs not loaded");
      step = detail::run_estimator_stage(records, *e, *p->second, t->second, workers);
    }
    records = std::move(step.survivors);
    m.stage_log.push_back(std::move(step.report));
  }
  if (cfg.selection) {
    if (cfg.selection_mode == SelectionMode::Top) {
      auto sel = select_top_n(records, *cfg.selection);
      records = std::move(sel.records);
      m.stage_log.push_back(std::move(sel.stage_log.front()));
    } else {
      const auto in = records.size();
      records = sample_uniform(records, cfg.selection->n, cfg.seed);
      m.stage_log.push_back({"sample_uniform",
                             in,
                             records.size(),
                             {{"kind", "sample"}, {"n", std::to_string(cfg.selection->n)}, {"seed", std::to_string(cfg.seed)}}});
    }
  }
  m.records = std::move(records);
  return m;
}

}  // namespace curate

#endif  // CURATE_PIPELINE_HPP
