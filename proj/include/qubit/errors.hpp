#pragma once

#include <stdexcept>
#include <string>

namespace qubit {

// Bad inputs: preconditions, schema violations, malformed files.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of a function (e.g. K0(x <= 0)).
class DomainError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// A numerical procedure failed (non-convergence, singular system, NaN).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Process exit codes used by qubitcli.
enum ExitCode : int {
  kExitOk = 0,
  kExitValidation = 2,
  kExitNumerical = 3,
  kExitIo = 4,
};

}  // namespace qubit
