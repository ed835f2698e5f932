#pragma once

#include <stdexcept>
#include <string>

namespace mtask {

// Base for all errors thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or invalid op arguments.
struct ShapeError : Error {
  using Error::Error;
};

// Dataset / file format problems (bad magic, checksum, truncation).
struct DataError : Error {
  using Error::Error;
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace mtask
