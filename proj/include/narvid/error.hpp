#pragma once

#include <stdexcept>
#include <string>

namespace narvid {

// Error taxonomy. Every error the engine raises derives from narvid::Error so
// callers (the CLI in particular) can map classes onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf produced or consumed by an op.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameter or architecture setting.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. backward() on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Bad magic or unsupported version.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Structurally well-formed data that violates a domain invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Truncated or internally inconsistent payload.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

}  // namespace narvid
