#pragma once

#include <stdexcept>
#include <string>

namespace cnd {

/// Base for all library errors. Subtypes exist so callers (and tests) can
/// distinguish failure kinds without parsing messages.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shape or size mismatch between operands.
struct DimensionError : Error {
  using Error::Error;
};

/// An index (class label, head id, stage, sample id) is out of range.
struct IndexError : Error {
  using Error::Error;
};

/// A computation produced or received a non-finite value, or a matrix
/// turned out numerically unusable (e.g. singular despite ridge).
struct NumericError : Error {
  using Error::Error;
};

/// An object was used in a state that forbids the operation
/// (e.g. backward on an already-consumed tape, SGD step without gradients).
struct StateError : Error {
  using Error::Error;
};

/// Invalid configuration value or invalid combination of options.
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed external input (CSV, JSON, checkpoint). Carries a position
/// when one is known.
struct ParseError : Error {
  using Error::Error;
  ParseError(const std::string& what, long line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_number(line) {}
  long line_number = -1;
};

/// A runtime value (not config, not shape) is outside its legal domain,
/// e.g. a non-positive softmax temperature.
struct ValueError : Error {
  using Error::Error;
};

}  // namespace cnd
