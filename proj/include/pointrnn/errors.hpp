#pragma once

#include <stdexcept>
#include <string>

namespace pointrnn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Tensor or channel dimensions do not conform.
class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// NaN or infinity appeared in a value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A computation record was traversed or extended after backward().
class ReuseError : public Error {
 public:
  using Error::Error;
};

/// Malformed or incompatible file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Model or training configuration is inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An iterative solver did not reach its tolerance.
class SolverError : public Error {
 public:
  using Error::Error;
};

}  // namespace pointrnn
