#pragma once

#include <stdexcept>
#include <string>

namespace preq {

// Failure classes double as CLI exit codes.
enum class ErrorClass : int {
  usage = 1,
  config = 2,
  transport = 3,
  data_integrity = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), cls_(cls) {}
  ErrorClass error_class() const noexcept { return cls_; }

 private:
  ErrorClass cls_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorClass::config, what) {}
};

/// Unknown registry key (template family, domain, filter name).
class LookupError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// A documented precondition of an operation was violated by its inputs.
class ContractViolation : public Error {
 public:
  explicit ContractViolation(const std::string& what) : Error(ErrorClass::data_integrity, what) {}
};

class DataIntegrityError : public Error {
 public:
  explicit DataIntegrityError(const std::string& what) : Error(ErrorClass::data_integrity, what) {}
};

/// Transport-level failure. `status` is the HTTP status, or 0 when no response arrived.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, int status, bool retryable)
      : Error(ErrorClass::transport, what), status_(status), retryable_(retryable) {}
  int status() const noexcept { return status_; }
  bool retryable() const noexcept { return retryable_; }

 private:
  int status_;
  bool retryable_;
};

/// The server answered, but not in the shape the protocol requires.
class SchemaError : public TransportError {
 public:
  explicit SchemaError(const std::string& what) : TransportError(what, 0, false) {}
};

}  // namespace preq
