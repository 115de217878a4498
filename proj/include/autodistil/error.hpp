#pragma once

#include <stdexcept>
#include <string>

namespace autodistil {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed search-space or configuration input.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Tensor shape disagreement.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Bad model input (token ids, sequence lengths, labels).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Teacher cannot seed the supernet.
class InitError : public Error {
 public:
  using Error::Error;
};

class OverflowError : public Error {
 public:
  using Error::Error;
};

/// Training diverged or was given unusable data.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// No candidate satisfies the cost constraint.
class InfeasibleError : public Error {
 public:
  InfeasibleError(const std::string& what, double min_cost)
      : Error(what), min_cost_(min_cost) {}
  double min_cost() const noexcept { return min_cost_; }

 private:
  double min_cost_;
};

class CheckpointError : public Error {
 public:
  enum class Kind { BadMagic, UnsupportedVersion, Truncated, ShapeMismatch, BadMetadata, TrailingBytes, Io };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace autodistil
