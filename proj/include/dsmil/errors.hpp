#pragma once

#include <stdexcept>
#include <string>

namespace dsmil {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes or dimensionalities disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An argument lies outside the mathematical domain of an operation
/// (empty input, lambda outside [0,1], non-binary label, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// An API was used in an invalid order or state.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input data is semantically inconsistent (mixed bag labels, ragged rows).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A file does not follow its binary or text format.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace dsmil
