#include <gtest/gtest.h>

#include "support.hpp"

using namespace curate;
using testing_support::record;
using testing_support::TempDir;

namespace {

const char* kMinimal = R"(
seed = 7

[[stage]]
kind = "resolution"
name = "resolution"

[[stage]]
name = "topiq"
score_key = "topiq"
comparator = ">"
threshold = 0.71

[selection]
n = 2
score_key = "topiq"
)";

std::vector<ImageRecord> small_records() {
  return {record("a", 2048, 2048, {{"topiq", 0.90}}), record("b", 1024, 1024, {{"topiq", 0.99}}),
          record("c", 1200, 1000, {{"topiq", 0.71}}), record("d", 4000, 300, {{"topiq", 0.80}}),
          record("e", 1500, 1500, {{"topiq", 0.72}})};
}

std::vector<std::string> ids(const DatasetManifest& m) {
  std::vector<std::string> out;
  for (const auto& r : m.records) out.push_back(r.image_id);
  return out;
}

}  // namespace

TEST(Config, ParsesStagesInOrder) {
  const auto cfg = parse_pipeline_config_text(kMinimal);
  ASSERT_EQ(cfg.stages.size(), 2u);
  EXPECT_TRUE(std::holds_alternative<ResolutionConfig>(cfg.stages[0]));
  const auto& t = std::get<StageConfig>(cfg.stages[1]);
  EXPECT_EQ(t.comparator, Comparator::Greater);
  EXPECT_EQ(t.threshold, 0.71);
  EXPECT_EQ(t.on_missing, OnMissing::Error);
  EXPECT_EQ(cfg.seed, 7u);
  ASSERT_TRUE(cfg.selection);
  EXPECT_EQ(cfg.selection->n, 2);
}

TEST(Config, Rejections) {
  EXPECT_CURATE_ERROR(parse_pipeline_config_text("bogus = 1"), ConfigError);
  EXPECT_CURATE_ERROR(parse_pipeline_config_text("[[stage]]\nname='x'\nkind='magic'"), ConfigError);
  EXPECT_CURATE_ERROR(parse_pipeline_config_text("[[stage]]\nkind='resolution'\nname='x'\n[[stage]]\nkind='resolution'\nname='x'"),
                      ConfigError);
  EXPECT_CURATE_ERROR(parse_pipeline_config_text("[[stage]]\nname='x'\nscore_key='s'\ncomparator='!='\nthreshold=1"),
                      ConfigError);
  EXPECT_CURATE_ERROR(parse_pipeline_config_text("[[stage]]\nname='x'\nscore_key='s'\ncomparator='>'\nthreshold='high'"),
                      ConfigError);
  EXPECT_CURATE_ERROR(parse_pipeline_config_text("[[stage]]\nname='x'\nkind='resolution'\nextra=1"), ConfigError);
  EXPECT_CURATE_ERROR(parse_pipeline_config_text("[[stage]]\nname='e'\nkind='estimator'\nactivations='a'"), ConfigError);
  EXPECT_CURATE_ERROR(parse_pipeline_config_text("[selection]\nn=0"), ConfigError);
  EXPECT_CURATE_ERROR(parse_pipeline_config_text("[selection]\nmode='random'"), ConfigError);
  EXPECT_CURATE_ERROR(parse_pipeline_config_text("[[stage]\n"), ParseError);
}

TEST(Config, HashIgnoresFormattingButNotValues) {
  const auto a = parse_pipeline_config_text(kMinimal);
  std::string spaced = kMinimal;
  spaced.insert(0, "# comment\n\n");
  EXPECT_EQ(config_hash(a), config_hash(parse_pipeline_config_text(spaced)));
  std::string changed = kMinimal;
  changed.replace(changed.find("0.71"), 4, "0.72");
  EXPECT_NE(config_hash(a), config_hash(parse_pipeline_config_text(changed)));
  EXPECT_EQ(config_hash(a).size(), 64u);
}

TEST(Config, GoldenConfigHashIsPinned) {
  const auto cfg = load_pipeline_config(std::filesystem::path(CURATE_TEST_DATA) / "golden.toml");
  EXPECT_EQ(config_hash(cfg), "c3b1bc7d66469514a9f2c27fa60392c6a8bf8cdb07ff51d242e06cff0fb5d69f");
}

TEST(Config, SampleConfigsParse) {
  for (const char* name : {"pipeline.toml", "laion_control.toml"})
    EXPECT_NO_THROW(load_pipeline_config(std::filesystem::path(CURATE_SOURCE_DIR) / "configs" / name)) << name;
}

TEST(Run, EmptyStageListIsIdentity) {
  const auto recs = small_records();
  const auto m = run_pipeline(recs, PipelineConfig{}, {});
  EXPECT_EQ(m.records, recs);
  EXPECT_TRUE(m.stage_log.empty());
}

TEST(Run, MinimalFunnel) {
  const auto m = run_pipeline(small_records(), parse_pipeline_config_text(kMinimal), {});
  // b is exactly 1024x1024, c sits on the 0.71 threshold
  EXPECT_EQ(ids(m), (std::vector<std::string>{"a", "d"}));
  ASSERT_EQ(m.stage_log.size(), 3u);
  EXPECT_EQ(m.stage_log[0].output_count, 4u);
  EXPECT_EQ(m.stage_log[1].output_count, 3u);
  EXPECT_EQ(m.stage_log[2].stage_name, "select_top_n");
  for (std::size_t i = 1; i < m.stage_log.size(); ++i)
    EXPECT_EQ(m.stage_log[i].input_count, m.stage_log[i - 1].output_count);
}

TEST(Run, UnknownScoreKeyIsConfigError) {
  const auto cfg = parse_pipeline_config_text("[[stage]]\nname='x'\nscore_key='nope'\ncomparator='>'\nthreshold=1");
  EXPECT_CURATE_ERROR(run_pipeline(small_records(), cfg, {}), ConfigError);
}

TEST(Run, ProvidersAttachBeforeStages) {
  std::vector<ImageRecord> recs = {record("a"), record("b")};
  ScoreProvider p("aesthetic", {{"a", {{"aesthetic", 6.0}}}, {"b", {{"aesthetic", 4.0}}}});
  const auto cfg = parse_pipeline_config_text("[[stage]]\nname='aesthetic'\nscore_key='aesthetic'\ncomparator='>='\nthreshold=4.5");
  const auto m = run_pipeline(recs, cfg, {p});
  EXPECT_EQ(ids(m), (std::vector<std::string>{"a"}));
}

TEST(Run, UniformSelectionUsesSeed) {
  const auto cfg = parse_pipeline_config_text("seed = 3\n[selection]\nn = 3\nmode = 'uniform'");
  const auto recs = small_records();
  const auto m = run_pipeline(recs, cfg, {});
  EXPECT_EQ(m.records, sample_uniform(recs, 3, 3));
  EXPECT_EQ(m.stage_log.back().stage_name, "sample_uniform");
}

TEST(Run, EstimatorProvenanceMismatch) {
  const auto fx = generate_planted(parse_planted_spec("L=3,M=4,K=2,hq=5,lq=5,test=3"), 1);
  TempDir dir;
  save_norms(fx.test, dir / "acts.ndjson");
  auto table = fit_estimator(fx.calibration, 2);
  table.timestep = 0.5;
  save_separation_table(table, dir / "table.json");
  const auto cfg = parse_pipeline_config_text("[[stage]]\nkind='estimator'\nname='est'\nactivations='acts.ndjson'\ntable='table.json'\nk=2");
  const auto inputs = load_pipeline_inputs(cfg, dir.path());
  std::vector<ImageRecord> recs;
  for (const auto& x : fx.test) recs.push_back(record(x.image_id));
  EXPECT_CURATE_ERROR(run_pipeline(recs, cfg, {}, inputs), ProvenanceMismatch);
}

TEST(Run, SmallCorpusWorkerInvariantAndRepeatable) {
  CorpusSpec spec;
  spec.count = 400;
  spec.calibration_per_group = 40;
  const auto fx = generate_corpus(spec, 5);
  TempDir dir;
  write_corpus(fx, dir.path());
  auto cfg = load_pipeline_config(std::filesystem::path(CURATE_TEST_DATA) / "golden.toml");
  cfg.selection->n = 20;
  std::vector<ScoreProvider> providers;
  for (const char* f : {"scores_safety.ndjson", "scores_coarse.ndjson", "scores_quality.ndjson"})
    providers.push_back(ScoreProvider::load(dir / f));
  const auto in1 = load_pipeline_inputs(cfg, dir.path(), 1);
  const auto base = to_json(run_pipeline(fx.records, cfg, providers, in1, 1)).dump();
  EXPECT_EQ(base, to_json(run_pipeline(fx.records, cfg, providers, in1, 1)).dump());
  const auto in4 = load_pipeline_inputs(cfg, dir.path(), 4);
  EXPECT_EQ(base, to_json(run_pipeline(fx.records, cfg, providers, in4, 4)).dump());
  const auto m = run_pipeline(fx.records, cfg, providers, in1, 1);
  EXPECT_EQ(m.records.size(), 20u);
  EXPECT_EQ(m.stage_log.size(), 10u);
}
