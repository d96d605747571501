#ifndef CURATE_METRICS_HPP
#define CURATE_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "curate/core.hpp"
#include "curate/parallel.hpp"

namespace curate {

/// n x d feature matrix, one row per image.
struct FeatureSet {
  std::string label;
  Eigen::MatrixXd vectors;
};

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::size_t count = 0;
};

inline constexpr double kSymmetryTolerance = 1e-9;
inline constexpr double kPsdJitter = 1e-8;

namespace detail {

struct Moments {
  std::size_t n = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd m2;  // sum of outer products of deviations
};

// Chan et al. pairwise combination of two partial moment sets.
inline Moments merge(const Moments& a, const Moments& b) {
  if (a.n == 0) return b;
  if (b.n == 0) return a;
  Moments out;
  out.n = a.n + b.n;
  const Eigen::VectorXd delta = b.mean - a.mean;
  const double wb = static_cast<double>(b.n) / static_cast<double>(out.n);
  out.mean = a.mean + delta * wb;
  out.m2 = a.m2 + b.m2 + delta * delta.transpose() * (static_cast<double>(a.n) * wb);
  return out;
}

}  // namespace detail

/// Sample mean and unbiased (n - 1) covariance. Rows are accumulated with
/// Welford updates in fixed-size blocks that are merged pairwise in block
/// order, so the result does not depend on the worker count.
inline GaussianStats fit_gaussian(const FeatureSet& f, unsigned workers = 1) {
  const auto n = static_cast<std::size_t>(f.vectors.rows());
  const auto d = f.vectors.cols();
  if (n < 2) fail(ErrorCode::DegenerateInput, "feature set '" + f.label + "' needs at least two vectors");
  if (d < 1) fail(ErrorCode::DegenerateInput, "feature set '" + f.label + "' has zero dimension");
  if (!f.vectors.allFinite()) fail(ErrorCode::InvariantError, "feature set '" + f.label + "' has non-finite values");

  constexpr std::size_t kBlock = 256;
  const std::size_t blocks = (n + kBlock - 1) / kBlock;
  std::vector<detail::Moments> parts(blocks);
  parallel_for(blocks, workers, [&](std::size_t b) {
    detail::Moments m;
    m.mean = Eigen::VectorXd::Zero(d);
    m.m2 = Eigen::MatrixXd::Zero(d, d);
    const std::size_t hi = std::min(n, (b + 1) * kBlock);
    for (std::size_t i = b * kBlock; i < hi; ++i) {
      const Eigen::VectorXd x = f.vectors.row(static_cast<Eigen::Index>(i)).transpose();
      ++m.n;
      const Eigen::VectorXd delta = x - m.mean;
      m.mean += delta / static_cast<double>(m.n);
      m.m2 += delta * (x - m.mean).transpose();
    }
    parts[b] = std::move(m);
  });
  while (parts.size() > 1) {
    std::vector<detail::Moments> next;
    for (std::size_t i = 0; i + 1 < parts.size(); i += 2) next.push_back(detail::merge(parts[i], parts[i + 1]));
    if (parts.size() % 2) next.push_back(std::move(parts.back()));
    parts = std::move(next);
  }
  GaussianStats g;
  g.count = n;
  g.mean = parts.front().mean;
  const Eigen::MatrixXd& m2 = parts.front().m2;
  g.cov = (m2 + m2.transpose()) / (2.0 * static_cast<double>(n - 1));
  return g;
}

namespace detail {

inline double psd_tolerance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return kPsdJitter * std::max({1.0, std::fabs(a.trace()), std::fabs(b.trace())});
}

inline void check_symmetric(const Eigen::MatrixXd& m, const char* which) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > kSymmetryTolerance * scale)
    fail(ErrorCode::NonPsdError, std::string("covariance ") + which + " is not symmetric");
}

// Symmetric PSD square root; eigenvalues down to -tol are treated as zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, double tol, const char* which) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) fail(ErrorCode::NonPsdError, std::string("eigendecomposition failed for ") + which);
  const Eigen::VectorXd& ev = es.eigenvalues();
  if (ev.minCoeff() < -tol)
    fail(ErrorCode::NonPsdError, std::string("covariance ") + which + " has a negative eigenvalue beyond jitter");
  const Eigen::VectorXd root = ev.cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}). The trace of the
/// cross term is computed from the eigenvalues of S_a^{1/2} S_b S_a^{1/2},
/// which is symmetric PSD and shares its spectrum with S_a S_b.
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  const auto d = a.mean.size();
  if (b.mean.size() != d || a.cov.rows() != d || a.cov.cols() != d || b.cov.rows() != d || b.cov.cols() != d)
    fail(ErrorCode::DimensionMismatch, "Gaussian statistics have different dimensions");
  detail::check_symmetric(a.cov, "a");
  detail::check_symmetric(b.cov, "b");
  const double tol = detail::psd_tolerance(a.cov, b.cov);
  const Eigen::MatrixXd root_a = detail::psd_sqrt(a.cov, tol, "a");
  detail::psd_sqrt(b.cov, tol, "b");

  Eigen::MatrixXd inner = root_a * b.cov * root_a;
  inner = (inner + inner.transpose()) * 0.5;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) fail(ErrorCode::NonPsdError, "eigendecomposition of the cross term failed");
  const double tr_cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  const double mean_term = (a.mean - b.mean).squaredNorm();
  const double fd = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_cross;
  return std::max(0.0, fd);
}

// -- scalar preference / similarity scores -------------------------------------

enum class ScalarMetric { Clip, ImageReward, HpsV2 };

constexpr std::string_view to_string(ScalarMetric m) noexcept {
  switch (m) {
    case ScalarMetric::Clip: return "clip";
    case ScalarMetric::ImageReward: return "image_reward";
    case ScalarMetric::HpsV2: return "hps_v2";
  }
  return "?";
}

inline ScalarMetric parse_scalar_metric(std::string_view s) {
  for (auto m : {ScalarMetric::Clip, ScalarMetric::ImageReward, ScalarMetric::HpsV2})
    if (s == to_string(m)) return m;
  fail(ErrorCode::ParseError, "unknown metric '" + std::string(s) + "' (expected clip, image_reward or hps_v2)");
}

struct ScalarScoreSet {
  ScalarMetric metric = ScalarMetric::Clip;
  std::map<std::string, double> scores;  // image_id -> value
};

struct ScoreSummary {
  ScalarMetric metric = ScalarMetric::Clip;
  double mean = 0.0;
  std::size_t count = 0;
};

/// Arithmetic mean, summed in image_id order.
inline ScoreSummary aggregate_scores(const ScalarScoreSet& s) {
  if (s.scores.empty()) fail(ErrorCode::EmptyInput, "no scores for metric " + std::string(to_string(s.metric)));
  double sum = 0.0;
  for (const auto& [id, v] : s.scores) sum += v;
  return {s.metric, sum / static_cast<double>(s.scores.size()), s.scores.size()};
}

/// Reads {"image_id", "metric", "value"} lines, grouped by metric.
inline std::map<ScalarMetric, ScalarScoreSet> load_scalar_scores(const std::filesystem::path& path) {
  std::map<ScalarMetric, ScalarScoreSet> out;
  for_each_ndjson(path, [&](const json& j, std::size_t line) {
    const std::string where = path.filename().string() + ":" + std::to_string(line);
    if (!j.is_object()) fail(ErrorCode::ParseError, where + ": expected an object");
    const auto metric = parse_scalar_metric(detail::string_field(j, "metric", where));
    const auto id = detail::string_field(j, "image_id", where);
    const double v = require_finite(detail::number_field(j, "value", where), where + " value");
    auto& set = out[metric];
    set.metric = metric;
    if (!set.scores.emplace(id, v).second)
      fail(ErrorCode::InvariantError, where + ": duplicate " + std::string(to_string(metric)) + " score for " + id);
  });
  return out;
}

/// Features file: a {"label": str} header line followed by
/// {"image_id", "dim", "vector"} lines of uniform dimension.
inline FeatureSet load_features(const std::filesystem::path& path) {
  FeatureSet f;
  std::vector<double> flat;
  long dim = -1;
  bool header = false;
  for_each_ndjson(path, [&](const json& j, std::size_t line) {
    const std::string where = path.filename().string() + ":" + std::to_string(line);
    if (!j.is_object()) fail(ErrorCode::ParseError, where + ": expected an object");
    if (!header) {
      f.label = detail::string_field(j, "label", where);
      header = true;
      return;
    }
    const auto d = detail::int_field(j, "dim", where);
    const json& v = detail::field(j, "vector", where);
    if (!v.is_array() || static_cast<long>(v.size()) != d || d < 1)
      fail(ErrorCode::DimensionMismatch, where + ": vector length does not match dim");
    if (dim < 0) dim = static_cast<long>(d);
    if (d != dim) fail(ErrorCode::DimensionMismatch, where + ": dimension differs from earlier vectors");
    for (const auto& x : v) {
      if (!x.is_number()) fail(ErrorCode::ParseError, where + ": vector entries must be numbers");
      flat.push_back(require_finite(x.get<double>(), where + " vector entry"));
    }
  });
  if (!header) fail(ErrorCode::ParseError, path.string() + ": missing label header line");
  const long rows = dim > 0 ? static_cast<long>(flat.size()) / dim : 0;
  f.vectors = Eigen::MatrixXd(rows, std::max(dim, 0L));
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < dim; ++c) f.vectors(r, c) = flat[static_cast<std::size_t>(r * dim + c)];
  return f;
}

/// One row of an automatic-metrics table. Missing columns print as "-".
struct MetricsRow {
  std::string label;
  std::optional<double> fd;
  std::optional<double> clip;
  std::optional<double> image_reward;
  std::optional<double> hps_v2;
};

inline std::string metrics_table_header() {
  char line[128];
  std::snprintf(line, sizeof line, "%-24s %10s %8s %8s %8s\n", "model", "FD-DINOv2", "CLIP", "IR", "HPS-v2");
  return line;
}

inline std::string format_metrics_row(const MetricsRow& row) {
  auto cell = [](const std::optional<double>& v, const char* fmt) {
    if (!v) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, fmt, *v);
    return std::string(buf);
  };
  char line[160];
  std::snprintf(line, sizeof line, "%-24s %10s %8s %8s %8s\n", row.label.c_str(), cell(row.fd, "%.1f").c_str(),
                cell(row.clip, "%.3f").c_str(), cell(row.image_reward, "%.2f").c_str(),
                cell(row.hps_v2, "%.3f").c_str());
  return line;
}

}  // namespace curate

#endif  // CURATE_METRICS_HPP
