#ifndef CURATE_CAPTION_CLIENT_HPP
#define CURATE_CAPTION_CLIENT_HPP

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "curate/http.hpp"

#include "curate/core.hpp"

namespace curate {

struct CaptionRequest {
  std::string image_id;
  std::string image_uri;
  std::string style = "user_prompt";
};

struct CaptionResult {
  std::string image_id;
  std::string caption;
  std::string model_tag;

  bool operator==(const CaptionResult&) const = default;
};

/// Per-request outcome: a result, or the error that ended the request.
struct CaptionOutcome {
  std::string image_id;
  std::optional<CaptionResult> result;
  std::optional<ErrorCode> error;
  std::string message;
  int attempts = 0;
  bool from_cache = false;
};

/// Exponential backoff: attempt i (1-based) is followed by a wait of
/// base * factor^(i-1) before the next try.
struct RetryPolicy {
  std::chrono::milliseconds base{1000};
  double factor = 2.0;
  int max_attempts = 5;
  std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
    std::this_thread::sleep_for(d);
  };

  std::chrono::milliseconds delay_after(int attempt) const {
    double ms = static_cast<double>(base.count());
    for (int i = 1; i < attempt; ++i) ms *= factor;
    return std::chrono::milliseconds(static_cast<long long>(ms));
  }
};

struct TransportResponse {
  bool delivered = false;  // false: connection-level failure
  int status = 0;
  std::string body;
  std::string error;
};

class CaptionTransport {
 public:
  virtual ~CaptionTransport() = default;
  virtual TransportResponse post(const CaptionRequest& req) = 0;
};

inline json to_json(const CaptionRequest& r) {
  return {{"image_id", r.image_id}, {"image_uri", r.image_uri}, {"style", r.style}};
}

inline json to_json(const CaptionResult& r) {
  return {{"image_id", r.image_id}, {"caption", r.caption}, {"model_tag", r.model_tag}};
}

/// POSTs {"image_id", "image_uri", "style"} as JSON to an HTTP endpoint such
/// as "http://127.0.0.1:9000/caption".
class HttpCaptionTransport : public CaptionTransport {
 public:
  explicit HttpCaptionTransport(const std::string& endpoint,
                                std::chrono::seconds timeout = std::chrono::seconds(30))
      : timeout_(timeout) {
    const auto scheme = endpoint.find("://");
    const auto path_start = endpoint.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    base_ = path_start == std::string::npos ? endpoint : endpoint.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : endpoint.substr(path_start);
  }

  TransportResponse post(const CaptionRequest& req) override {
    httplib::Client client(base_);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    auto res = client.Post(path_, to_json(req).dump(), "application/json");
    if (!res) return {false, 0, {}, httplib::to_string(res.error())};
    return {true, res->status, res->body, {}};
  }

 private:
  std::string base_;
  std::string path_;
  std::chrono::seconds timeout_;
};

/// Offline stand-in that answers from an NDJSON file of
/// {"image_id", "caption", "model_tag"?} lines; unknown ids get a 404.
class FileCaptionTransport : public CaptionTransport {
 public:
  explicit FileCaptionTransport(const std::filesystem::path& path) {
    for_each_ndjson(path, [&](const json& j, std::size_t line) {
      const std::string where = path.filename().string() + ":" + std::to_string(line);
      CaptionResult r;
      r.image_id = detail::string_field(j, "image_id", where);
      r.caption = detail::string_field(j, "caption", where);
      r.model_tag = j.value("model_tag", std::string("file-stub"));
      rows_[r.image_id] = std::move(r);
    });
  }

  TransportResponse post(const CaptionRequest& req) override {
    auto it = rows_.find(req.image_id);
    if (it == rows_.end()) return {true, 404, R"({"error":"unknown image_id"})", {}};
    return {true, 200, to_json(it->second).dump(), {}};
  }

 private:
  std::unordered_map<std::string, CaptionResult> rows_;
};

/// Previously obtained captions, persisted as NDJSON of CaptionResult.
class CaptionCache {
 public:
  CaptionCache() = default;

  static CaptionCache load(const std::filesystem::path& path) {
    CaptionCache c;
    if (!std::filesystem::exists(path)) return c;
    for_each_ndjson(path, [&](const json& j, std::size_t line) {
      const std::string where = path.filename().string() + ":" + std::to_string(line);
      CaptionResult r{detail::string_field(j, "image_id", where), detail::string_field(j, "caption", where),
                      detail::string_field(j, "model_tag", where)};
      c.rows_[r.image_id] = std::move(r);
    });
    return c;
  }

  const CaptionResult* find(const std::string& image_id) const {
    std::lock_guard lock(mu_);
    auto it = rows_.find(image_id);
    return it == rows_.end() ? nullptr : &it->second;
  }

  void put(const CaptionResult& r) {
    std::lock_guard lock(mu_);
    rows_[r.image_id] = r;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return rows_.size();
  }

  void save(const std::filesystem::path& path) const {
    std::lock_guard lock(mu_);
    std::string text;
    for (const auto& [id, r] : rows_) {
      text += to_json(r).dump();
      text += '\n';
    }
    write_text_file(path, text);
  }

  CaptionCache(CaptionCache&& other) noexcept : rows_(std::move(other.rows_)) {}
  CaptionCache& operator=(CaptionCache&& other) noexcept {
    rows_ = std::move(other.rows_);
    return *this;
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, CaptionResult> rows_;
};

namespace detail {

inline bool has_control_chars(const std::string& s) {
  for (unsigned char c : s)
    if (c < 0x20 || c == 0x7F) return true;
  return false;
}

inline bool is_blank(const std::string& s) {
  return s.find_first_not_of(" \t\r\n") == std::string::npos;
}

inline CaptionResult parse_caption_response(const CaptionRequest& req, const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception&) {
    fail(ErrorCode::BadResponseError, "caption response is not JSON");
  }
  if (!j.is_object() || !j.contains("caption") || !j["caption"].is_string() || !j.contains("image_id") ||
      !j["image_id"].is_string())
    fail(ErrorCode::BadResponseError, "caption response lacks image_id/caption strings");
  CaptionResult r{j["image_id"].get<std::string>(), j["caption"].get<std::string>(),
                  j.value("model_tag", std::string{})};
  if (r.image_id != req.image_id)
    fail(ErrorCode::BadResponseError, "caption response is for '" + r.image_id + "', expected '" + req.image_id + "'");
  if (is_blank(r.caption)) fail(ErrorCode::EmptyCaptionError, "empty caption for '" + req.image_id + "'");
  if (has_control_chars(r.caption))
    fail(ErrorCode::BadResponseError, "caption for '" + req.image_id + "' contains control characters");
  return r;
}

inline bool is_transient(const TransportResponse& r) {
  return !r.delivered || r.status == 408 || r.status == 429 || r.status >= 500;
}

inline CaptionOutcome caption_one(const CaptionRequest& req, CaptionTransport& transport, const RetryPolicy& policy) {
  CaptionOutcome out;
  out.image_id = req.image_id;
  const int attempts = std::max(1, policy.max_attempts);
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    out.attempts = attempt;
    const auto resp = transport.post(req);
    if (is_transient(resp)) {
      out.error = ErrorCode::TransportError;
      out.message = resp.delivered ? "HTTP " + std::to_string(resp.status) : "transport failure: " + resp.error;
      if (attempt < attempts) policy.sleep(policy.delay_after(attempt));
      continue;
    }
    try {
      if (resp.status < 200 || resp.status >= 300)
        fail(ErrorCode::BadResponseError, "HTTP " + std::to_string(resp.status) + " for '" + req.image_id + "'");
      out.result = parse_caption_response(req, resp.body);
      out.error.reset();
      out.message.clear();
    } catch (const Error& e) {
      out.error = e.code();
      out.message = e.what();
    }
    return out;
  }
  out.message += " (after " + std::to_string(attempts) + " attempts)";
  return out;
}

}  // namespace detail

/// Captions every request, one outcome per request in request order. Cached
/// image ids are answered without contacting the transport, repeated ids are
/// requested once, and a failed request never aborts the rest of the batch.
inline std::vector<CaptionOutcome> caption_batch(const std::vector<CaptionRequest>& requests,
                                                 CaptionTransport& transport, const RetryPolicy& policy = {},
                                                 CaptionCache* cache = nullptr, unsigned max_in_flight = 8) {
  for (const auto& r : requests)
    if (r.image_uri.empty()) fail(ErrorCode::InvariantError, "caption request '" + r.image_id + "' has no image_uri");

  std::vector<CaptionOutcome> out(requests.size());
  std::vector<std::size_t> pending;
  std::unordered_map<std::string, std::size_t> first_index;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    const auto& id = requests[i].image_id;
    if (cache) {
      if (const auto* hit = cache->find(id)) {
        out[i] = {id, *hit, std::nullopt, {}, 0, true};
        continue;
      }
    }
    if (first_index.emplace(id, i).second) pending.push_back(i);
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < pending.size();) {
      const std::size_t i = pending[k];
      out[i] = detail::caption_one(requests[i], transport, policy);
      if (cache && out[i].result) cache->put(*out[i].result);
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(max_in_flight, 1, std::max<std::size_t>(pending.size(), 1));
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  for (std::size_t i = 0; i < requests.size(); ++i) {
    if (!out[i].image_id.empty()) continue;
    out[i] = out[first_index.at(requests[i].image_id)];
  }
  return out;
}

/// Fills record captions from successful outcomes; returns how many were set.
inline std::size_t apply_captions(std::vector<ImageRecord>& records, const std::vector<CaptionOutcome>& outcomes) {
  std::unordered_map<std::string, const CaptionResult*> by_id;
  for (const auto& o : outcomes)
    if (o.result) by_id[o.image_id] = &*o.result;
  std::size_t n = 0;
  for (auto& r : records)
    if (auto it = by_id.find(r.image_id); it != by_id.end()) {
      r.caption = it->second->caption;
      ++n;
    }
  return n;
}

}  // namespace curate

#endif  // CURATE_CAPTION_CLIENT_HPP
