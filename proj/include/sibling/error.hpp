#pragma once

#include <stdexcept>
#include <string>

namespace sibling {

/// Error codes double as the machine-parsable prefix printed by the CLI.
enum class ErrorCode {
  kShape,
  kDomain,
  kNumeric,
  kIo,
  kFormat,
  kConfig,
  kMissing,
  kArgument,
};

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "E_SHAPE";
    case ErrorCode::kDomain: return "E_DOMAIN";
    case ErrorCode::kNumeric: return "E_NUMERIC";
    case ErrorCode::kIo: return "E_IO";
    case ErrorCode::kFormat: return "E_FORMAT";
    case ErrorCode::kConfig: return "E_CONFIG";
    case ErrorCode::kMissing: return "E_MISSING";
    case ErrorCode::kArgument: return "E_ARGUMENT";
  }
  return "E_UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace sibling
