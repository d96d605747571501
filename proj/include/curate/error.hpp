#ifndef CURATE_ERROR_HPP
#define CURATE_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace curate {

enum class ErrorCode {
  ParseError,
  InvariantError,
  IoError,
  ConfigError,
  MissingScoreError,
  MissingRecordError,
  DimensionMismatch,
  MissingMapError,
  DuplicateMapError,
  ShapeMismatch,
  ProvenanceMismatch,
  KTooLarge,
  UnfittedError,
  IncompleteVotesError,
  DomainError,
  DegenerateInput,
  NonPsdError,
  EmptyInput,
  TransportError,
  BadResponseError,
  EmptyCaptionError,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::InvariantError: return "InvariantError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::MissingScoreError: return "MissingScoreError";
    case ErrorCode::MissingRecordError: return "MissingRecordError";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::MissingMapError: return "MissingMapError";
    case ErrorCode::DuplicateMapError: return "DuplicateMapError";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::ProvenanceMismatch: return "ProvenanceMismatch";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::UnfittedError: return "UnfittedError";
    case ErrorCode::IncompleteVotesError: return "IncompleteVotesError";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::NonPsdError: return "NonPsdError";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::TransportError: return "TransportError";
    case ErrorCode::BadResponseError: return "BadResponseError";
    case ErrorCode::EmptyCaptionError: return "EmptyCaptionError";
  }
  return "UnknownError";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI's error JSON) can dispatch on it without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  std::string_view name() const noexcept { return to_string(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace curate

#endif  // CURATE_ERROR_HPP
