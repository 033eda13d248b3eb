#pragma once

#include <stdexcept>
#include <string>

namespace d2evo {

// Root of every error the library throws. The CLI maps the subclasses onto
// stable exit codes (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments, malformed specs, shape mismatches. Exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Configuration file or override problems. Exit code 2.
class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Exact enumeration would exceed its configured budget.
class BudgetError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Loop-level failures: empty anchor sets after fallback, empty buffers,
// nothing to resume. Exit code 3.
class LoopError : public Error {
 public:
  using Error::Error;
};

// On-disk state that does not parse or does not agree with its manifest.
class CorruptionError : public LoopError {
 public:
  using LoopError::LoopError;
};

// HTTP failures from the endpoint adapter. Exit code 4.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, int status = 0)
      : Error(what), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const TransportError*>(&e) != nullptr) return 4;
  return 3;
}

}  // namespace d2evo
