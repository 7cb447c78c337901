#pragma once

#include <stdexcept>
#include <string>

namespace ueforge {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Bad values supplied by the caller (labels out of range, empty data, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

// API misuse: calling something in a state where it cannot work.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed or incompatible files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid run / generation / training configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A non-finite value appeared where finiteness is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace ueforge
