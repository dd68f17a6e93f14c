#pragma once

#include <stdexcept>
#include <string>

namespace fairlab {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Tensor/layer shape mismatch; message names expected vs actual.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (fractions out of range, empty groups, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file; message carries the line number where known.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Evaluation cannot proceed (empty dataset, group with no examples, ...).
class EvalError : public Error {
 public:
  using Error::Error;
};

/// Loss became non-finite during training; message names epoch and batch.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

}  // namespace fairlab
