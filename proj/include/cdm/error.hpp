#pragma once

#include <stdexcept>
#include <string>

namespace cdm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dimension or shape mismatch between arguments.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or precondition on scalar arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or failed numerical procedures.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or incompatible files (CSV, checkpoints, results).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace cdm
