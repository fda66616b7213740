#pragma once

#include <stdexcept>
#include <string>

namespace samref {

enum class ErrorCode {
  InvalidArgument = 1,  // input-domain violations (bounds, shapes, non-finite)
  Io,
  Format,               // corrupt or unrecognised file contents
  NotFound,
  State,                // protocol / session-consistency violations
  Numeric,              // non-finite loss, frozen-parameter drift
  Config,
  Conflict,
  TooLarge,
  Internal,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace samref
