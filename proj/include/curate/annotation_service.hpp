#ifndef CURATE_ANNOTATION_SERVICE_HPP
#define CURATE_ANNOTATION_SERVICE_HPP

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "curate/http.hpp"

#include "curate/eval_stats.hpp"

namespace curate {

struct VoteRecord {
  std::string task_id;
  std::string annotator_id;
  std::string side;  // left | right | tie, as clicked
  std::string received_at;

  bool operator==(const VoteRecord&) const = default;
};

inline json to_json(const VoteRecord& v) {
  return {{"task_id", v.task_id}, {"annotator_id", v.annotator_id}, {"choice", v.side}, {"received_at", v.received_at}};
}

inline VoteRecord vote_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::ParseError, where + ": expected an object");
  return {detail::string_field(j, "task_id", where), detail::string_field(j, "annotator_id", where),
          detail::string_field(j, "choice", where), j.value("received_at", std::string{})};
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03lldZ", buf, static_cast<long long>(ms));
  return out;
}

/// Append-only NDJSON vote log. Each append is written with a single
/// write(2) and fsync'd before returning.
class VoteLog {
 public:
  /// Opens (creating if needed) and replays the log. A final line without a
  /// trailing newline is a torn write: it is dropped and cut from the file.
  explicit VoteLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::string text = std::filesystem::exists(path_) ? read_text_file(path_) : std::string{};
    const auto last_nl = text.rfind('\n');
    const std::size_t keep = last_nl == std::string::npos ? 0 : last_nl + 1;
    if (keep != text.size()) {
      truncated_bytes_ = text.size() - keep;
      std::filesystem::resize_file(path_, keep);
      text.resize(keep);
    }
    std::size_t lineno = 0, pos = 0;
    while (pos < text.size()) {
      const auto nl = text.find('\n', pos);
      const std::string line = text.substr(pos, nl - pos);
      pos = nl + 1;
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const std::string where = path_.filename().string() + ":" + std::to_string(lineno);
      replayed_.push_back(vote_from_json(parse_json_text(line, where), where));
    }

    fd_ = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) fail(ErrorCode::IoError, "cannot open vote log " + path_.string() + ": " + std::strerror(errno));
  }

  VoteLog(const VoteLog&) = delete;
  VoteLog& operator=(const VoteLog&) = delete;
  ~VoteLog() {
    if (fd_ >= 0) ::close(fd_);
  }

  void append(const VoteRecord& v) {
    const std::string line = to_json(v).dump() + "\n";
    std::size_t done = 0;
    while (done < line.size()) {
      const auto n = ::write(fd_, line.data() + done, line.size() - done);
      if (n < 0) {
        if (errno == EINTR) continue;
        fail(ErrorCode::IoError, "vote log write failed: " + std::string(std::strerror(errno)));
      }
      done += static_cast<std::size_t>(n);
    }
    if (::fsync(fd_) != 0) fail(ErrorCode::IoError, "vote log fsync failed: " + std::string(std::strerror(errno)));
  }

  const std::vector<VoteRecord>& replayed() const { return replayed_; }
  std::size_t truncated_bytes() const { return truncated_bytes_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
  std::vector<VoteRecord> replayed_;
  std::size_t truncated_bytes_ = 0;
};

enum class SubmitStatus { Created, UnknownTask, InvalidChoice, Duplicate, TaskFull };

constexpr int http_status(SubmitStatus s) noexcept {
  switch (s) {
    case SubmitStatus::Created: return 201;
    case SubmitStatus::UnknownTask: return 404;
    case SubmitStatus::InvalidChoice: return 422;
    case SubmitStatus::Duplicate: return 409;
    case SubmitStatus::TaskFull: return 409;
  }
  return 500;
}

/// Task dispatch and vote collection for one experiment. All state lives in
/// memory, rebuilt from the vote log at construction; every mutation goes
/// through one mutex so the duplicate check and the append are atomic.
class AnnotationService {
 public:
  AnnotationService(SbSExperiment exp, const std::filesystem::path& log_path)
      : exp_(std::move(exp)), tasks_(build_tasks(exp_)), log_(log_path) {
    for (std::size_t i = 0; i < tasks_.size(); ++i) index_.emplace(tasks_[i].task_id, i);
    votes_.resize(tasks_.size());
    for (const auto& v : log_.replayed()) {
      auto it = index_.find(v.task_id);
      if (it == index_.end()) fail(ErrorCode::InvariantError, "vote log references unknown task '" + v.task_id + "'");
      auto& slot = votes_[it->second];
      const Choice c = tasks_[it->second].to_model_choice(v.side);
      if (slot.size() >= kAnnotatorsPerItem || !slot.emplace(v.annotator_id, c).second)
        fail(ErrorCode::InvariantError, "vote log has a repeated or excess vote on '" + v.task_id + "'");
    }
  }

  /// Fewest-votes-first among tasks this annotator has not voted on and that
  /// are not yet full; ties go to the earlier task.
  std::optional<SbSTask> next_task(const std::string& annotator_id) const {
    std::lock_guard lock(mu_);
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
      const auto& slot = votes_[i];
      if (slot.size() >= kAnnotatorsPerItem || slot.contains(annotator_id)) continue;
      if (!best || slot.size() < votes_[*best].size()) best = i;
    }
    if (!best) return std::nullopt;
    return tasks_[*best];
  }

  SubmitStatus submit(const std::string& task_id, const std::string& annotator_id, const std::string& side) {
    auto it = index_.find(task_id);
    if (it == index_.end()) return SubmitStatus::UnknownTask;
    if (side != "left" && side != "right" && side != "tie") return SubmitStatus::InvalidChoice;
    if (annotator_id.empty()) return SubmitStatus::InvalidChoice;
    const auto& task = tasks_[it->second];
    std::lock_guard lock(mu_);
    auto& slot = votes_[it->second];
    if (slot.contains(annotator_id)) return SubmitStatus::Duplicate;
    if (slot.size() >= kAnnotatorsPerItem) return SubmitStatus::TaskFull;
    log_.append({task_id, annotator_id, side, utc_timestamp()});
    slot.emplace(annotator_id, task.to_model_choice(side));
    return SubmitStatus::Created;
  }

  /// Aggregate over tasks that have all three votes; criteria without any
  /// completed task are omitted.
  json results() const {
    std::lock_guard lock(mu_);
    std::map<Criterion, std::vector<Choice>> majorities;
    std::size_t completed = 0;
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
      const auto& slot = votes_[i];
      if (slot.size() != kAnnotatorsPerItem) continue;
      ++completed;
      std::vector<Choice> choices;
      for (const auto& [who, c] : slot) choices.push_back(c);
      majorities[tasks_[i].criterion].push_back(majority_vote(std::span<const Choice>(choices)));
    }
    std::vector<CriterionOutcome> outcomes;
    for (auto c : kCriteria)
      if (auto it = majorities.find(c); it != majorities.end()) outcomes.push_back(tally(c, it->second));
    json out = experiment_report_json(exp_, outcomes);
    out["completed_tasks"] = completed;
    out["total_tasks"] = tasks_.size();
    out["completion"] = tasks_.empty() ? 0.0 : static_cast<double>(completed) / static_cast<double>(tasks_.size());
    return out;
  }

  /// Annotations as the eval-stats library sees them (model-side choices).
  std::vector<Annotation> annotations() const {
    std::lock_guard lock(mu_);
    std::vector<Annotation> out;
    for (std::size_t i = 0; i < tasks_.size(); ++i)
      for (const auto& [who, c] : votes_[i])
        out.push_back({exp_.experiment_id, tasks_[i].prompt_index, tasks_[i].criterion, who, c});
    return out;
  }

  std::size_t vote_count(const std::string& task_id) const {
    std::lock_guard lock(mu_);
    auto it = index_.find(task_id);
    return it == index_.end() ? 0 : votes_[it->second].size();
  }

  const SbSExperiment& experiment() const { return exp_; }
  const std::vector<SbSTask>& tasks() const { return tasks_; }
  std::size_t truncated_bytes() const { return log_.truncated_bytes(); }

 private:
  SbSExperiment exp_;
  std::vector<SbSTask> tasks_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::map<std::string, Choice>> votes_;
  VoteLog log_;
  mutable std::mutex mu_;
};

inline std::filesystem::path vote_log_path(const std::filesystem::path& log_dir, const std::string& experiment_id) {
  return log_dir / (experiment_id + ".votes.ndjson");
}

struct BindAddress {
  std::string host = "127.0.0.1";
  int port = 8080;
};

/// "host:port", ":port" or "port"; empty means the default.
inline BindAddress parse_bind_address(const std::string& s) {
  BindAddress b;
  if (s.empty()) return b;
  const auto colon = s.rfind(':');
  std::string port = s;
  if (colon != std::string::npos) {
    if (colon > 0) b.host = s.substr(0, colon);
    port = s.substr(colon + 1);
  }
  try {
    std::size_t used = 0;
    b.port = std::stoi(port, &used);
    if (used != port.size() || b.port < 0 || b.port > 65535) throw std::out_of_range("port");
  } catch (const std::exception&) {
    fail(ErrorCode::ConfigError, "bad bind address '" + s + "'");
  }
  return b;
}

inline BindAddress bind_address_from_env() {
  const char* v = std::getenv("CURATE_BIND");
  return parse_bind_address(v ? v : "");
}

namespace detail {

inline void reply_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void reply_error(httplib::Response& res, int status, const std::string& message) {
  reply_json(res, status, {{"error", message}});
}

}  // namespace detail

/// Registers the service routes on `server`. A non-empty static_dir is
/// mounted at "/" for the UI bundle.
inline void install_routes(httplib::Server& server, AnnotationService& svc,
                           const std::filesystem::path& static_dir = {}) {
  server.Get("/tasks/next", [&svc](const httplib::Request& req, httplib::Response& res) {
    const auto annotator = req.get_param_value("annotator");
    if (annotator.empty()) return detail::reply_error(res, 400, "missing annotator");
    auto task = svc.next_task(annotator);
    if (!task) {
      res.status = 204;
      return;
    }
    detail::reply_json(res, 200, to_json(*task));
  });

  server.Post("/annotations", [&svc](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      return detail::reply_error(res, 400, "body is not JSON");
    }
    if (!body.is_object()) return detail::reply_error(res, 400, "body must be an object");
    auto str = [&](const char* k) {
      auto it = body.find(k);
      return it != body.end() && it->is_string() ? it->get<std::string>() : std::string{};
    };
    const auto task_id = str("task_id");
    const auto annotator = str("annotator_id");
    const auto choice = str("choice");
    if (annotator.empty()) return detail::reply_error(res, 400, "missing annotator_id");
    try {
      const auto s = svc.submit(task_id, annotator, choice);
      switch (s) {
        case SubmitStatus::Created: return detail::reply_json(res, 201, {{"status", "recorded"}, {"task_id", task_id}});
        case SubmitStatus::UnknownTask: return detail::reply_error(res, 404, "unknown task '" + task_id + "'");
        case SubmitStatus::InvalidChoice: return detail::reply_error(res, 422, "choice must be left, right or tie");
        case SubmitStatus::Duplicate: return detail::reply_error(res, 409, "already voted on this task");
        case SubmitStatus::TaskFull: return detail::reply_error(res, 409, "task already has three votes");
      }
    } catch (const Error& e) {
      detail::reply_error(res, 500, e.what());
    }
  });

  server.Get(R"(/results/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    if (req.matches[1] != svc.experiment().experiment_id)
      return detail::reply_error(res, 404, "unknown experiment '" + std::string(req.matches[1]) + "'");
    detail::reply_json(res, 200, svc.results());
  });

  if (!static_dir.empty() && !server.set_mount_point("/", static_dir.string()))
    fail(ErrorCode::IoError, "static dir " + static_dir.string() + " does not exist");
}

}  // namespace curate

#endif  // CURATE_ANNOTATION_SERVICE_HPP
