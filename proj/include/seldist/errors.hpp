#pragma once

#include <stdexcept>
#include <string>

namespace seldist {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes do not conform for an op.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Domain violation (log of non-positive, division by zero, non-scalar loss).
struct ValueError : Error {
  explicit ValueError(const std::string& msg) : Error(msg) {}
};

// NaN/divergence during training; carries the offending term/step in msg.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Bad configuration (conflicting toggles, unknown keys, invalid flag values).
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// File I/O and parse failures. `offset` is the byte offset of the problem
// when known, -1 otherwise.
struct IoError : Error {
  long long offset;
  IoError(const std::string& msg, long long off = -1) : Error(msg), offset(off) {}
};

}  // namespace seldist
