#pragma once

#include <stdexcept>
#include <string>

namespace smar {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value where a finite one is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in the wrong lifecycle state (e.g. double backward).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyper-parameter or argument value.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Malformed input data.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Configuration, checkpoint, or log file problem.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace smar
