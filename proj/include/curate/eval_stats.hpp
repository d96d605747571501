#ifndef CURATE_EVAL_STATS_HPP
#define CURATE_EVAL_STATS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <boost/multiprecision/cpp_int.hpp>

#include "curate/core.hpp"
#include "curate/random.hpp"

namespace curate {

enum class Criterion { Relevance, Aesthetics, Complexity, Fidelity };
enum class Choice { A, B, Tie };
enum class Direction { ABetter, BBetter, None };

inline constexpr std::array<Criterion, 4> kCriteria = {Criterion::Relevance, Criterion::Aesthetics,
                                                      Criterion::Complexity, Criterion::Fidelity};

inline constexpr double kSignificanceLevel = 0.05;
inline constexpr int kAnnotatorsPerItem = 3;

constexpr std::string_view to_string(Criterion c) noexcept {
  switch (c) {
    case Criterion::Relevance: return "relevance";
    case Criterion::Aesthetics: return "aesthetics";
    case Criterion::Complexity: return "complexity";
    case Criterion::Fidelity: return "fidelity";
  }
  return "?";
}

constexpr std::string_view display_name(Criterion c) noexcept {
  switch (c) {
    case Criterion::Relevance: return "Image-Text Relevance";
    case Criterion::Aesthetics: return "Aesthetic Quality";
    case Criterion::Complexity: return "Image Complexity";
    case Criterion::Fidelity: return "Fidelity";
  }
  return "?";
}

constexpr std::string_view to_string(Choice c) noexcept {
  switch (c) {
    case Choice::A: return "A";
    case Choice::B: return "B";
    case Choice::Tie: return "tie";
  }
  return "?";
}

constexpr std::string_view to_string(Direction d) noexcept {
  switch (d) {
    case Direction::ABetter: return "a_better";
    case Direction::BBetter: return "b_better";
    case Direction::None: return "none";
  }
  return "?";
}

inline Criterion parse_criterion(std::string_view s) {
  for (auto c : kCriteria)
    if (s == to_string(c)) return c;
  fail(ErrorCode::ParseError, "unknown criterion '" + std::string(s) + "'");
}

inline Choice parse_choice(std::string_view s) {
  if (s == "A" || s == "a") return Choice::A;
  if (s == "B" || s == "b") return Choice::B;
  if (s == "tie") return Choice::Tie;
  fail(ErrorCode::ParseError, "unknown choice '" + std::string(s) + "'");
}

struct ImagePair {
  std::string uri_a;
  std::string uri_b;
};

struct SbSExperiment {
  std::string experiment_id;
  std::string model_a;
  std::string model_b;
  std::vector<std::string> prompts;
  std::vector<ImagePair> image_pairs;  // optional; one per prompt when present
  std::uint64_t seed = 0;
};

struct Annotation {
  std::string experiment_id;
  std::size_t prompt_index = 0;
  Criterion criterion = Criterion::Relevance;
  std::string annotator_id;
  Choice choice = Choice::Tie;
};

struct CriterionOutcome {
  Criterion criterion = Criterion::Relevance;
  std::uint64_t wins_a = 0;
  std::uint64_t wins_b = 0;
  std::uint64_t ties = 0;
  double win_rate_a = 0.5;
  double p_value = 1.0;
  bool significant = false;
  Direction direction = Direction::None;

  bool operator==(const CriterionOutcome&) const = default;
};

inline void validate(const SbSExperiment& e) {
  if (e.experiment_id.empty()) fail(ErrorCode::InvariantError, "experiment_id must be non-empty");
  if (e.prompts.empty()) fail(ErrorCode::InvariantError, "experiment " + e.experiment_id + " has no prompts");
  if (e.model_a == e.model_b) fail(ErrorCode::InvariantError, "experiment " + e.experiment_id + ": model_a == model_b");
  if (!e.image_pairs.empty() && e.image_pairs.size() != e.prompts.size())
    fail(ErrorCode::InvariantError, "experiment " + e.experiment_id + ": need one image pair per prompt");
}

// -- voting ------------------------------------------------------------------

/// Choice held by at least two of the three annotators; a three-way split
/// (A, B, tie) resolves to a tie.
inline Choice majority_vote(std::span<const Choice> votes) {
  if (votes.size() != kAnnotatorsPerItem)
    fail(ErrorCode::IncompleteVotesError,
         "majority vote needs exactly 3 votes, got " + std::to_string(votes.size()));
  std::array<int, 3> counts{};
  for (auto v : votes) ++counts[static_cast<std::size_t>(v)];
  for (auto c : {Choice::A, Choice::B, Choice::Tie})
    if (counts[static_cast<std::size_t>(c)] >= 2) return c;
  return Choice::Tie;
}

inline Choice majority_vote(std::span<const Annotation> votes) {
  std::set<std::string> annotators;
  std::vector<Choice> choices;
  for (const auto& a : votes) {
    if (!annotators.insert(a.annotator_id).second)
      fail(ErrorCode::InvariantError, "annotator '" + a.annotator_id + "' voted twice on one item");
    choices.push_back(a.choice);
  }
  return majority_vote(std::span<const Choice>(choices));
}

// -- exact binomial test -------------------------------------------------------

/// Rounds a possibly fractional success count (wins + ties/2) to an integer.
/// Exact .5 values round towards n/2, which is half-up below the midpoint and
/// half-down above it, so relabelling A and B never changes the p-value.
inline std::int64_t round_half_count(double k, std::int64_t n) {
  const double lo = std::floor(k);
  const double frac = k - lo;
  auto klo = static_cast<std::int64_t>(lo);
  if (frac < 0.5) return klo;
  if (frac > 0.5) return klo + 1;
  return (2 * klo < n) ? klo + 1 : klo;
}

/// Exact two-sided binomial p-value at success probability 1/2: the total
/// probability of outcomes no more likely than the observed one. Binomial
/// coefficients are summed as exact integers and divided by 2^n once.
inline double binomial_p(double k_half_wins, std::int64_t n) {
  if (n < 1) fail(ErrorCode::DomainError, "binomial test needs n >= 1");
  if (!(k_half_wins >= 0.0) || k_half_wins > static_cast<double>(n))
    fail(ErrorCode::DomainError, "binomial test needs 0 <= k <= n");
  const std::int64_t k = round_half_count(k_half_wins, n);
  const std::int64_t tail = std::min(k, n - k);
  if (2 * tail >= n - 1) return 1.0;

  using boost::multiprecision::cpp_int;
  cpp_int coeff = 1;
  cpp_int sum = 1;
  for (std::int64_t i = 1; i <= tail; ++i) {
    coeff *= (n - i + 1);
    coeff /= i;
    sum += coeff;
  }
  // Both tails are the same size; the whole sum is 2 * sum / 2^n.
  boost::multiprecision::cpp_bin_float_100 p(sum);
  p = ldexp(p, static_cast<int>(1 - n));
  return std::min(1.0, static_cast<double>(p));
}

// -- aggregation ---------------------------------------------------------------

inline CriterionOutcome tally(Criterion criterion, std::span<const Choice> outcomes) {
  CriterionOutcome o;
  o.criterion = criterion;
  for (auto c : outcomes) {
    if (c == Choice::A) ++o.wins_a;
    else if (c == Choice::B) ++o.wins_b;
    else ++o.ties;
  }
  const auto total = o.wins_a + o.wins_b + o.ties;
  if (total == 0) fail(ErrorCode::EmptyInput, "no voted items for criterion " + std::string(to_string(criterion)));
  const double k = static_cast<double>(o.wins_a) + static_cast<double>(o.ties) / 2.0;
  o.win_rate_a = k / static_cast<double>(total);
  o.p_value = binomial_p(k, static_cast<std::int64_t>(total));
  o.significant = o.p_value < kSignificanceLevel;
  if (o.significant && o.win_rate_a > 0.5) o.direction = Direction::ABetter;
  else if (o.significant && o.win_rate_a < 0.5) o.direction = Direction::BBetter;
  return o;
}

/// Majority-votes every (prompt, criterion) item and tallies each criterion.
/// Every item must have exactly three votes from distinct annotators.
inline std::vector<CriterionOutcome> aggregate(const SbSExperiment& exp, const std::vector<Annotation>& annotations) {
  validate(exp);
  const std::size_t n = exp.prompts.size();
  std::vector<std::vector<Annotation>> items(n * kCriteria.size());
  for (const auto& a : annotations) {
    if (a.experiment_id != exp.experiment_id)
      fail(ErrorCode::InvariantError, "annotation belongs to experiment '" + a.experiment_id + "'");
    if (a.prompt_index >= n)
      fail(ErrorCode::InvariantError, "annotation prompt_index " + std::to_string(a.prompt_index) + " out of range");
    items[a.prompt_index * kCriteria.size() + static_cast<std::size_t>(a.criterion)].push_back(a);
  }
  std::vector<CriterionOutcome> out;
  for (auto c : kCriteria) {
    std::vector<Choice> majorities;
    majorities.reserve(n);
    for (std::size_t p = 0; p < n; ++p) {
      const auto& votes = items[p * kCriteria.size() + static_cast<std::size_t>(c)];
      if (votes.size() != kAnnotatorsPerItem)
        fail(ErrorCode::IncompleteVotesError, "prompt " + std::to_string(p) + " / " + std::string(to_string(c)) +
                                                  " has " + std::to_string(votes.size()) + " votes, need 3");
      majorities.push_back(majority_vote(std::span<const Annotation>(votes)));
    }
    out.push_back(tally(c, majorities));
  }
  return out;
}

// -- task construction -------------------------------------------------------

struct SbSTask {
  std::string task_id;
  std::string experiment_id;
  std::size_t prompt_index = 0;
  std::string prompt;
  Criterion criterion = Criterion::Relevance;
  std::string left_image_uri;
  std::string right_image_uri;
  bool a_on_left = true;

  // Maps an on-screen choice back to the model that was shown there.
  Choice to_model_choice(std::string_view side) const {
    if (side == "tie") return Choice::Tie;
    if (side == "left") return a_on_left ? Choice::A : Choice::B;
    if (side == "right") return a_on_left ? Choice::B : Choice::A;
    fail(ErrorCode::ParseError, "unknown side '" + std::string(side) + "'");
  }
};

/// One task per (prompt, criterion), prompt-major. A/B placement is drawn
/// per task from the seeded generator.
inline std::vector<SbSTask> build_tasks(const SbSExperiment& exp, const std::vector<ImagePair>& pairs,
                                        std::uint64_t seed) {
  validate(exp);
  if (pairs.size() != exp.prompts.size())
    fail(ErrorCode::InvariantError, "build_tasks: need exactly one image pair per prompt");
  Rng rng(seed);
  std::vector<SbSTask> tasks;
  tasks.reserve(pairs.size() * kCriteria.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    if (pairs[p].uri_a == pairs[p].uri_b)
      fail(ErrorCode::InvariantError, "prompt " + std::to_string(p) + ": both images have the same URI");
    for (auto c : kCriteria) {
      SbSTask t;
      t.task_id = exp.experiment_id + "-p" + std::to_string(p) + "-" + std::string(to_string(c));
      t.experiment_id = exp.experiment_id;
      t.prompt_index = p;
      t.prompt = exp.prompts[p];
      t.criterion = c;
      t.a_on_left = rng.coin();
      t.left_image_uri = t.a_on_left ? pairs[p].uri_a : pairs[p].uri_b;
      t.right_image_uri = t.a_on_left ? pairs[p].uri_b : pairs[p].uri_a;
      tasks.push_back(std::move(t));
    }
  }
  return tasks;
}

inline std::vector<SbSTask> build_tasks(const SbSExperiment& exp) { return build_tasks(exp, exp.image_pairs, exp.seed); }

// -- I/O -----------------------------------------------------------------------

inline SbSExperiment experiment_from_json(const json& j) {
  const std::string where = "experiment";
  if (!j.is_object()) fail(ErrorCode::ParseError, "experiment must be a JSON object");
  SbSExperiment e;
  e.experiment_id = detail::string_field(j, "experiment_id", where);
  e.model_a = detail::string_field(j, "model_a", where);
  e.model_b = detail::string_field(j, "model_b", where);
  const json& prompts = detail::field(j, "prompts", where);
  if (!prompts.is_array()) fail(ErrorCode::ParseError, "experiment: prompts must be an array");
  for (const auto& p : prompts) {
    if (!p.is_string()) fail(ErrorCode::ParseError, "experiment: prompts must be strings");
    e.prompts.push_back(p.get<std::string>());
  }
  if (auto it = j.find("image_pairs"); it != j.end()) {
    if (!it->is_array()) fail(ErrorCode::ParseError, "experiment: image_pairs must be an array");
    for (const auto& pair : *it)
      e.image_pairs.push_back({detail::string_field(pair, "a", "image_pairs"), detail::string_field(pair, "b", "image_pairs")});
  }
  if (auto it = j.find("seed"); it != j.end()) e.seed = it->get<std::uint64_t>();
  validate(e);
  return e;
}

inline SbSExperiment load_experiment(const std::filesystem::path& path) { return experiment_from_json(read_json_file(path)); }

inline json to_json(const Annotation& a) {
  return {{"experiment_id", a.experiment_id},
          {"prompt_index", a.prompt_index},
          {"criterion", std::string(to_string(a.criterion))},
          {"annotator_id", a.annotator_id},
          {"choice", std::string(to_string(a.choice))}};
}

inline Annotation annotation_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::ParseError, where + ": expected an object");
  Annotation a;
  a.experiment_id = detail::string_field(j, "experiment_id", where);
  const auto idx = detail::int_field(j, "prompt_index", where);
  if (idx < 0) fail(ErrorCode::InvariantError, where + ": negative prompt_index");
  a.prompt_index = static_cast<std::size_t>(idx);
  a.criterion = parse_criterion(detail::string_field(j, "criterion", where));
  a.annotator_id = detail::string_field(j, "annotator_id", where);
  a.choice = parse_choice(detail::string_field(j, "choice", where));
  return a;
}

inline std::vector<Annotation> load_annotations(const std::filesystem::path& path) {
  std::vector<Annotation> out;
  for_each_ndjson(path, [&](const json& j, std::size_t line) {
    out.push_back(annotation_from_json(j, path.filename().string() + ":" + std::to_string(line)));
  });
  return out;
}

inline json to_json(const CriterionOutcome& o) {
  return {{"criterion", std::string(to_string(o.criterion))},
          {"wins_a", o.wins_a},
          {"wins_b", o.wins_b},
          {"ties", o.ties},
          {"win_rate_a", o.win_rate_a},
          {"p_value", o.p_value},
          {"significant", o.significant},
          {"direction", std::string(to_string(o.direction))}};
}

inline json to_json(const SbSTask& t) {
  return {{"task_id", t.task_id},
          {"experiment_id", t.experiment_id},
          {"prompt_index", t.prompt_index},
          {"prompt", t.prompt},
          {"criterion", std::string(to_string(t.criterion))},
          {"left_image_uri", t.left_image_uri},
          {"right_image_uri", t.right_image_uri},
          {"placement", t.a_on_left ? "A" : "B"}};
}

inline json experiment_report_json(const SbSExperiment& exp, const std::vector<CriterionOutcome>& outcomes) {
  json rows = json::array();
  for (const auto& o : outcomes) rows.push_back(to_json(o));
  return {{"experiment_id", exp.experiment_id},
          {"model_a", exp.model_a},
          {"model_b", exp.model_b},
          {"significance_level", kSignificanceLevel},
          {"outcomes", std::move(rows)}};
}

/// Plain-text table: one row per criterion with the win rate of model A,
/// the W/T/L counts and the p-value. Significant rows are marked '+' (A
/// better) or '-' (B better); others are blank.
inline std::string format_report_table(const SbSExperiment& exp, const std::vector<CriterionOutcome>& outcomes) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "Side-by-side: %s (A) vs %s (B)\n", exp.model_a.c_str(), exp.model_b.c_str());
  out += line;
  std::snprintf(line, sizeof line, "%-22s %9s %7s %7s %7s %12s %4s\n", "criterion", "win_rate", "wins_a", "ties",
                "wins_b", "p_value", "sig");
  out += line;
  for (const auto& o : outcomes) {
    const char* mark = o.direction == Direction::ABetter ? "+" : o.direction == Direction::BBetter ? "-" : "";
    std::snprintf(line, sizeof line, "%-22s %9.2f %7llu %7llu %7llu %12.6g %4s\n",
                  std::string(display_name(o.criterion)).c_str(), o.win_rate_a,
                  static_cast<unsigned long long>(o.wins_a), static_cast<unsigned long long>(o.ties),
                  static_cast<unsigned long long>(o.wins_b), o.p_value, mark);
    out += line;
  }
  return out;
}

}  // namespace curate

#endif  // CURATE_EVAL_STATS_HPP
