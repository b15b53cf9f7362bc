#pragma once

#include <stdexcept>
#include <string>

namespace dgmr {

/// Base of every error thrown by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller supplied something invalid (bad shape, out-of-range ratio, unknown
/// preset). The CLI maps these to exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class BoundsError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Pivot row is numerically zero; the Gram-Schmidt step cannot proceed.
class DegeneratePivotError : public Error {
 public:
  using Error::Error;
};

/// Every remaining candidate neuron has a zero weight row.
class RankExhaustedError : public Error {
 public:
  RankExhaustedError(const std::string& what, std::size_t selectable)
      : Error(what), selectable_(selectable) {}
  std::size_t selectable() const noexcept { return selectable_; }

 private:
  std::size_t selectable_;
};

/// Malformed or unsupported container file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dgmr
