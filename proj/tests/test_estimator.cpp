#include <gtest/gtest.h>

#include "oracles.hpp"
#include "support.hpp"

using namespace curate;
using testing_support::TempDir;

namespace {

const std::string kHash = prompt_hash(kDefaultEstimatorPrompt);

ActivationNormMatrix matrix(std::string id, int L, int M, std::vector<double> norms) {
  return {std::move(id), L, M, std::move(norms), kDefaultEstimatorTimestep, kHash};
}

ActivationNormMatrix random_matrix(Rng& rng, std::string id, int L, int M, bool coarse) {
  std::vector<double> v;
  for (int i = 0; i < L * M; ++i)
    v.push_back(coarse ? static_cast<double>(rng.below(4)) : rng.uniform(0.0, 3.0));
  return matrix(std::move(id), L, M, std::move(v));
}

std::vector<AttentionMap> full_maps(Rng& rng, const std::string& id, int L, int M) {
  std::vector<AttentionMap> maps;
  for (int l = 1; l <= L; ++l)
    for (int m = 1; m <= M; ++m) {
      AttentionMap a{id, l, m, 3, 2, {}};
      for (int i = 0; i < 6; ++i) a.values.push_back(rng.normal(0.0, 1.0));
      maps.push_back(a);
    }
  return maps;
}

}  // namespace

TEST(Norms, ThreeFourFive) {
  const std::vector<double> v = {3, 4, 0, 0};
  EXPECT_EQ(frobenius_norm(v), 5.0);
  EXPECT_EQ(frobenius_norm(std::vector<double>(6, 0.0)), 0.0);
}

TEST(Norms, MatchesExtendedPrecisionSumOfSquares) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v;
    for (int i = 0; i < 35; ++i) v.push_back(rng.normal(0.0, 1.0));
    long double ss = 0.0L;
    for (double x : v) ss += static_cast<long double>(x) * x;
    const double expect = static_cast<double>(std::sqrt(ss));
    EXPECT_NEAR(frobenius_norm(v), expect, 1e-12 * expect);
  }
}

TEST(Norms, NoOverflowOrUnderflow) {
  EXPECT_DOUBLE_EQ(frobenius_norm(std::vector<double>{3e200, 4e200}), 5e200);
  EXPECT_DOUBLE_EQ(frobenius_norm(std::vector<double>{3e-200, 4e-200}), 5e-200);
}

TEST(Norms, ComputeNormsGridAndErrors) {
  Rng rng(2);
  auto maps = full_maps(rng, "img", 2, 3);
  const auto x = compute_norms(maps, 2, 3, 0.25, kHash);
  EXPECT_EQ(x.norms.size(), 6u);
  EXPECT_EQ(x.at(2, 1), frobenius_norm(maps[3].values));

  auto missing = maps;
  missing.pop_back();
  EXPECT_CURATE_ERROR(compute_norms(missing, 2, 3), MissingMapError);
  auto dup = maps;
  dup.push_back(maps[0]);
  EXPECT_CURATE_ERROR(compute_norms(dup, 2, 3), DuplicateMapError);
  auto bad = maps;
  bad[1].values.pop_back();
  EXPECT_CURATE_ERROR(compute_norms(bad, 2, 3), ShapeMismatch);
  EXPECT_CURATE_ERROR(compute_norms(maps, 2, 2), ShapeMismatch);
}

TEST(Norms, AttentionMapFileReduces) {
  TempDir dir;
  std::string text;
  for (int l = 1; l <= 2; ++l)
    for (int m = 1; m <= 2; ++m)
      text += json{{"image_id", "a"}, {"layer", l}, {"token", m}, {"h", 2}, {"w", 2}, {"values", {3, 4, 0, 0}}}.dump() + "\n";
  write_text_file(dir / "maps.ndjson", text);
  const auto xs = load_attention_maps(dir / "maps.ndjson", 2, 2, 0.25, kHash);
  ASSERT_EQ(xs.size(), 1u);
  EXPECT_EQ(xs[0].norms, (std::vector<double>{5, 5, 5, 5}));
}

TEST(Separation, HandEnumeratedCell) {
  const CalibrationSet cal{{matrix("h1", 1, 1, {2.0}), matrix("h2", 1, 1, {3.0})},
                           {matrix("l1", 1, 1, {1.0}), matrix("l2", 1, 1, {2.5})}};
  const auto t = fit_separation(cal);
  EXPECT_EQ(t.at(1, 1), 3u);
  EXPECT_EQ(t.pair_count, 4u);
}

TEST(Separation, IdenticalGroupsScoreZero) {
  Rng rng(3);
  const auto x = random_matrix(rng, "x", 3, 4, false);
  const auto t = fit_separation({{x}, {x}});
  for (auto c : t.counts) EXPECT_EQ(c, 0u);
}

TEST(Separation, AgreesWithQuadrupleLoop) {
  Rng rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    const int L = 1 + static_cast<int>(rng.below(8)), M = 1 + static_cast<int>(rng.below(8));
    CalibrationSet cal;
    const bool coarse = rng.coin();  // many exact ties
    for (std::uint64_t i = 0, n = 1 + rng.below(20); i < n; ++i) cal.hq.push_back(random_matrix(rng, "h", L, M, coarse));
    for (std::uint64_t i = 0, n = 1 + rng.below(20); i < n; ++i) cal.lq.push_back(random_matrix(rng, "l", L, M, coarse));
    const auto t = fit_separation(cal, 1 + static_cast<unsigned>(trial % 3));
    ASSERT_EQ(t.counts, oracle::separation_counts(cal));
    const int K = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(L * M)));
    EXPECT_EQ(select_top_k(t, K).top_k, oracle::top_k(t.counts, L, M, K));
  }
}

TEST(TopK, TieBrokenByLayer) {
  SeparationTable t;
  t.layers = 2;
  t.tokens = 2;
  t.counts = {5, 2, 5, 1};
  EXPECT_EQ(select_top_k(t, 2).top_k, (std::vector<Cell>{{1, 1}, {2, 1}}));
}

TEST(TopK, AllCellsWhenKIsLM) {
  SeparationTable t;
  t.layers = 2;
  t.tokens = 3;
  t.counts = {1, 9, 4, 4, 0, 9};
  EXPECT_EQ(select_top_k(t, 6).top_k, (std::vector<Cell>{{1, 2}, {2, 3}, {1, 3}, {2, 1}, {1, 1}, {2, 2}}));
}

TEST(TopK, BadK) {
  SeparationTable t;
  t.layers = 2;
  t.tokens = 2;
  t.counts = {1, 2, 3, 4};
  EXPECT_CURATE_ERROR(select_top_k(t, 5), KTooLarge);
  EXPECT_CURATE_ERROR(select_top_k(t, 0), ConfigError);
}

TEST(Scoring, SingletonAndZero) {
  SeparationTable t;
  t.layers = 2;
  t.tokens = 2;
  t.counts = {9, 0, 0, 0};
  t.prompt_hash = kHash;
  t = select_top_k(t, 1);
  EXPECT_EQ(score_image(matrix("x", 2, 2, {4.2, 1, 1, 1}), t), 4.2);
  EXPECT_EQ(score_image(matrix("x", 2, 2, {0, 0, 0, 0}), t), 0.0);
}

TEST(Scoring, GatherThenSumOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int L = 1 + static_cast<int>(rng.below(8)), M = 1 + static_cast<int>(rng.below(8));
    SeparationTable t;
    t.layers = L;
    t.tokens = M;
    t.prompt_hash = kHash;
    for (int i = 0; i < L * M; ++i) t.counts.push_back(rng.below(50));
    t = select_top_k(t, 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(L * M))));
    const auto x = random_matrix(rng, "x", L, M, false);
    long double sum = 0.0L;
    for (const auto& c : t.top_k) sum += x.norms[static_cast<std::size_t>((c.layer - 1) * M + c.token - 1)];
    EXPECT_NEAR(score_image(x, t), static_cast<double>(sum), 1e-12 * std::max(1.0, static_cast<double>(sum)));
  }
}

TEST(Scoring, CorpusEdgeCases) {
  Rng rng(6);
  CalibrationSet cal{{random_matrix(rng, "h", 2, 2, false)}, {random_matrix(rng, "l", 2, 2, false)}};
  const auto t = fit_estimator(cal, 2);
  EXPECT_TRUE(score_corpus({}, t).empty());
  const auto x = random_matrix(rng, "one", 2, 2, false);
  const auto s = score_corpus({x}, t);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].first, "one");
  EXPECT_EQ(s[0].second, score_image(x, t));
}

TEST(Scoring, CompatibilityChecks) {
  Rng rng(7);
  CalibrationSet cal{{random_matrix(rng, "h", 2, 2, false)}, {random_matrix(rng, "l", 2, 2, false)}};
  auto unfitted = fit_separation(cal);
  EXPECT_CURATE_ERROR(score_image(cal.hq[0], unfitted), UnfittedError);
  const auto t = select_top_k(unfitted, 2);
  EXPECT_CURATE_ERROR(score_image(random_matrix(rng, "x", 3, 2, false), t), ShapeMismatch);
  auto other = random_matrix(rng, "x", 2, 2, false);
  other.timestep = 0.5;
  EXPECT_CURATE_ERROR(score_image(other, t), ProvenanceMismatch);
  other.timestep = kDefaultEstimatorTimestep;
  other.prompt_hash = prompt_hash("a photo");
  EXPECT_CURATE_ERROR(score_image(other, t), ProvenanceMismatch);
}

TEST(Calibration, Validation) {
  Rng rng(8);
  const auto a = random_matrix(rng, "a", 2, 2, false);
  EXPECT_CURATE_ERROR(fit_separation({{}, {a}}), EmptyInput);
  EXPECT_CURATE_ERROR(fit_separation({{a}, {random_matrix(rng, "b", 2, 3, false)}}), ShapeMismatch);
  auto b = a;
  b.timestep = 0.5;
  EXPECT_CURATE_ERROR(fit_separation({{a}, {b}}), ProvenanceMismatch);
  auto neg = a;
  neg.norms[0] = -1.0;
  EXPECT_CURATE_ERROR(fit_separation({{a}, {neg}}), InvariantError);
}

TEST(Calibration, WorkerCountDoesNotChangeTable) {
  const auto fx = generate_planted(parse_planted_spec("L=6,M=10,K=8,hq=60,lq=60,test=10"), 3);
  const auto t1 = fit_estimator(fx.calibration, 8, 1);
  for (unsigned w : {2u, 5u}) EXPECT_EQ(fit_estimator(fx.calibration, 8, w), t1);
}

TEST(Estimator, DefaultPromptAndTimestep) {
  EXPECT_EQ(kDefaultEstimatorTimestep, 0.25);
  EXPECT_EQ(kDefaultEstimatorPrompt.substr(0, 28), "complex. detailed. simple. b");
  EXPECT_EQ(kDefaultEstimatorPrompt.substr(kDefaultEstimatorPrompt.size() - 17), "low illumination.");
}

TEST(Estimator, PlantedCellsRankHighAndSeparate) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto fx = generate_planted(PlantedSpec{}, seed);
    const auto t = fit_estimator(fx.calibration, fx.spec.planted);
    std::set<Cell> got(t.top_k.begin(), t.top_k.end());
    std::size_t hit = 0;
    for (const auto& c : fx.planted) hit += got.contains(c);
    EXPECT_GE(hit, 15u);
    std::vector<double> scores;
    for (const auto& [id, s] : score_corpus(fx.test, t)) scores.push_back(s);
    EXPECT_GE(oracle::auc(scores, fx.test_is_hq), 0.95);
  }
}

TEST(EstimatorIo, TableAndNormsRoundTrip) {
  TempDir dir;
  const auto fx = generate_planted(parse_planted_spec("L=3,M=4,K=2,hq=5,lq=5,test=4"), 9);
  const auto t = fit_estimator(fx.calibration, 3);
  save_separation_table(t, dir / "t.json");
  EXPECT_EQ(load_separation_table(dir / "t.json"), t);
  save_norms(fx.test, dir / "n.ndjson");
  EXPECT_EQ(load_norms(dir / "n.ndjson"), fx.test);
}

TEST(PlantedSpec, ParsesOverrides) {
  const auto s = parse_planted_spec("L=4,M=5,K=3,hq=10,lq=11,test=6,hq_mean=3,sd=0.2");
  EXPECT_EQ(s.layers, 4);
  EXPECT_EQ(s.tokens, 5);
  EXPECT_EQ(s.planted, 3);
  EXPECT_EQ(s.lq, 11);
  EXPECT_EQ(s.hq_mean, 3.0);
  EXPECT_CURATE_ERROR(parse_planted_spec("Q=1"), ConfigError);
  EXPECT_CURATE_ERROR(parse_planted_spec("L=2,M=2,K=5"), KTooLarge);
}
