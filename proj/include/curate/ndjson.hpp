#ifndef CURATE_NDJSON_HPP
#define CURATE_NDJSON_HPP

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "curate/error.hpp"

namespace curate {

using json = nlohmann::json;

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) fail(ErrorCode::IoError, "write failed: " + path.string());
}

inline json parse_json_text(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, where + ": " + e.what());
  }
}

inline json read_json_file(const std::filesystem::path& path) {
  return parse_json_text(read_text_file(path), path.string());
}

/// Calls fn(object, line_number) for every non-blank line of an NDJSON file.
/// Line numbers are 1-based and appear in parse errors.
inline void for_each_ndjson(const std::filesystem::path& path,
                            const std::function<void(const json&, std::size_t)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj = parse_json_text(line, path.string() + ":" + std::to_string(lineno));
    try {
      fn(obj, lineno);
    } catch (const json::exception& e) {
      fail(ErrorCode::ParseError,
           path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline std::string to_ndjson(const std::vector<json>& rows) {
  std::string out;
  for (const auto& row : rows) {
    out += row.dump();
    out += '\n';
  }
  return out;
}

// Shortest round-trip decimal form of a double, as written in JSON output.
inline std::string format_number(double v) { return json(v).dump(); }

inline double require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) fail(ErrorCode::InvariantError, what + " is not finite");
  return v;
}

}  // namespace curate

#endif  // CURATE_NDJSON_HPP
