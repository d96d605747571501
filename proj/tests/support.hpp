#ifndef CURATE_TESTS_SUPPORT_HPP
#define CURATE_TESTS_SUPPORT_HPP

#include <filesystem>
#include <functional>
#include <string>

#include <gtest/gtest.h>

#include "curate/curate.hpp"

namespace testing_support {

inline curate::ImageRecord record(std::string id, std::int64_t w = 2048, std::int64_t h = 2048,
                                  std::map<std::string, double> scores = {}) {
  curate::ImageRecord r;
  r.image_id = id;
  r.source_uri = "file:///pool/" + id + ".jpg";
  r.width_px = w;
  r.height_px = h;
  r.scores = std::move(scores);
  return r;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("curate-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline curate::ErrorCode error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const curate::Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected a curate::Error";
  return curate::ErrorCode::InvariantError;
}

}  // namespace testing_support

#define EXPECT_CURATE_ERROR(stmt, code) EXPECT_EQ(testing_support::error_of([&] { stmt; }), curate::ErrorCode::code)

#endif  // CURATE_TESTS_SUPPORT_HPP
