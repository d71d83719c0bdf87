#pragma once

#include <stdexcept>
#include <string>

namespace f2s {

// Base of every error raised by the library. The CLI maps the subclasses
// onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters or settings (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing, inconsistent or malformed data (exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

// A matrix violates Connectome invariants on load.
class ValidationError : public DataError {
 public:
  using DataError::DataError;
};

// Binary/text file does not follow its documented layout.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

// A diffusion or schedule index outside the valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// API misuse such as calling backward on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf appeared in a loss or gradient (exit code 4).
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Checkpoint produced under a different configuration.
class VersionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace f2s
