// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef SSMSEP_ERRORS_H_
#define SSMSEP_ERRORS_H_

#include <stdexcept>
#include <string>

namespace ssmsep {

// Caller violated a shape or API contract.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid hyperparameters or signal-processing geometry.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation
// (non-positive step size, silent reference, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// NaN/Inf encountered during computation. `stage` is the index of the
// separator block that produced it, or -1 when not applicable.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, int stage = -1)
      : std::runtime_error(what), stage_(stage) {}
  int stage() const noexcept { return stage_; }

 private:
  int stage_;
};

// Scene synthesis could not satisfy its recipe.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or unreadable file.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ssmsep

#endif  // SSMSEP_ERRORS_H_
