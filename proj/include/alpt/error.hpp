#pragma once

#include <stdexcept>
#include <string>

namespace alpt {

// Machine-readable failure categories; the CLI maps these to exit codes.
enum class ErrorCategory {
  Generic = 1,
  Usage = 2,
  Io = 3,
  Format = 4,
  Precondition = 5,
  DigestMismatch = 6,
  Locked = 7,
  Numeric = 8,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, std::string message)
      : std::runtime_error(std::move(message)), category_(category) {}

  ErrorCategory category() const { return category_; }

  const char* category_name() const {
    switch (category_) {
      case ErrorCategory::Usage: return "usage";
      case ErrorCategory::Io: return "io";
      case ErrorCategory::Format: return "format";
      case ErrorCategory::Precondition: return "precondition";
      case ErrorCategory::DigestMismatch: return "digest-mismatch";
      case ErrorCategory::Locked: return "locked";
      case ErrorCategory::Numeric: return "numeric";
      default: return "error";
    }
  }

 private:
  ErrorCategory category_;
};

inline void require(bool ok, ErrorCategory category, const std::string& message) {
  if (!ok) throw Error(category, message);
}

inline void require(bool ok, const std::string& message) {
  require(ok, ErrorCategory::Precondition, message);
}

}  // namespace alpt
