#pragma once

#include <stdexcept>
#include <string>

namespace ctnet {

// Shape/geometry violations of op contracts.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration (bad field values, unknown keys, mismatched name sets).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File and format problems (unreadable image, bad magic, CRC failure, ...).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values or other numeric breakdown during compute.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ctnet
