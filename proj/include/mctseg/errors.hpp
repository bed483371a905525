#pragma once

#include <stdexcept>
#include <string>

namespace mctseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument, spec or configuration value supplied by the caller.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes that do not fit an operator's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed, missing or inconsistent input data (files, masks, class maps).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace mctseg
