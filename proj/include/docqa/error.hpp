#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace docqa {

enum class ErrorKind {
  InvalidInput,
  Conflict,
  Format,
  NotFound,
  Environment,
  Ingest,
  BackendUnavailable,
  Request,
  FixtureMissing,
  DecompositionFailed,
  LocalizationFailed,
  Load,
  Config,
};

std::string_view to_string(ErrorKind kind);

// Every domain failure in the library is reported through this type; the
// kind lets callers (and the CLI exit-code mapping) branch without string
// matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind),
        detail_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::Conflict: return "conflict";
    case ErrorKind::Format: return "format-error";
    case ErrorKind::NotFound: return "not-found";
    case ErrorKind::Environment: return "environment-error";
    case ErrorKind::Ingest: return "ingest-error";
    case ErrorKind::BackendUnavailable: return "backend-unavailable";
    case ErrorKind::Request: return "request-error";
    case ErrorKind::FixtureMissing: return "fixture-missing";
    case ErrorKind::DecompositionFailed: return "decomposition-failed";
    case ErrorKind::LocalizationFailed: return "localization-failed";
    case ErrorKind::Load: return "load-error";
    case ErrorKind::Config: return "config-error";
  }
  return "error";
}

inline bool error_kind_from_string(std::string_view name, ErrorKind& out) {
  for (int k = 0; k <= static_cast<int>(ErrorKind::Config); ++k) {
    if (to_string(static_cast<ErrorKind>(k)) == name) {
      out = static_cast<ErrorKind>(k);
      return true;
    }
  }
  return false;
}

}  // namespace docqa
