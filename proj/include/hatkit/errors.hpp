#pragma once

#include <stdexcept>
#include <string>

namespace hatkit {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape / extent mismatches between operands.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf produced or consumed by a numeric primitive.
struct NumericError : Error {
  using Error::Error;
};

// Invalid argument values (filter size out of range, eps <= 0, ...).
struct ValueError : Error {
  using Error::Error;
};

// Inverse DFT asked to realify a spectrum that is not conjugate-symmetric.
struct SymmetryError : Error {
  using Error::Error;
};

// Malformed serialized artifacts (checkpoints, dataset files).
struct FormatError : Error {
  enum class Kind {
    BadMagic,
    BadVersion,
    Truncated,
    DuplicateName,
    CrcMismatch,
    Malformed,
  };
  Kind kind;
  FormatError(Kind k, const std::string& msg) : Error(msg), kind(k) {}
};

// Configuration parsing / validation problems.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace hatkit
