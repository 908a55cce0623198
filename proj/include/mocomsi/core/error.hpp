#pragma once

#include <stdexcept>
#include <string>

namespace mocomsi {

// Base of every error raised by the library. Subclasses map onto the error
// kinds the tools distinguish when choosing an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller supplied something invalid: bad files, bad configs, bad arguments.
class UserError : public Error {
 public:
  using Error::Error;
};

class IngestError : public UserError {
 public:
  using UserError::UserError;
};

class ParseError : public UserError {
 public:
  using UserError::UserError;
};

class ConsistencyError : public UserError {
 public:
  using UserError::UserError;
};

class ConfigError : public UserError {
 public:
  using UserError::UserError;
};

class CapacityError : public UserError {
 public:
  using UserError::UserError;
};

class DependencyError : public UserError {
 public:
  using UserError::UserError;
};

class PairingError : public UserError {
 public:
  using UserError::UserError;
};

class FormatError : public UserError {
 public:
  using UserError::UserError;
};

// Mathematical precondition failed (empty input, non-positive temperature...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Internal contract broken: shapes disagree, vectors not normalized.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class TrainingFault : public Error {
 public:
  TrainingFault(const std::string& what, long step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

}  // namespace mocomsi
