#pragma once

#include <stdexcept>
#include <string>

namespace cdpmil {

// Shape or argument violations (bad dimensions, empty inputs, invalid ranges).
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string &what) : std::invalid_argument(what) {}
};

// Inputs outside a function's mathematical domain.
class DomainError : public std::domain_error {
 public:
  explicit DomainError(const std::string &what) : std::domain_error(what) {}
};

// Matrix factorization failure.  `pivot` is the zero-based index of the
// first non-positive pivot encountered.
class DecompositionError : public std::runtime_error {
 public:
  DecompositionError(const std::string &what, int pivot)
      : std::runtime_error(what), pivot(pivot) {}
  int pivot;
};

// Non-finite values produced where finiteness is an invariant.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string &what) : std::runtime_error(what) {}
};

// Malformed or truncated files.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string &what) : std::runtime_error(what) {}
};

// A file newer than this build can read.
class IncompatibilityError : public std::runtime_error {
 public:
  explicit IncompatibilityError(const std::string &what)
      : std::runtime_error(what) {}
};

// Dataset-level inconsistencies (missing bags, mismatched dimensions).
class DatasetError : public std::runtime_error {
 public:
  explicit DatasetError(const std::string &what) : std::runtime_error(what) {}
};

// Invalid training or pipeline configuration.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string &what) : std::runtime_error(what) {}
};

// A metric that is undefined for the given inputs (e.g. single-class AUROC).
class UndefinedMetricError : public std::runtime_error {
 public:
  explicit UndefinedMetricError(const std::string &what)
      : std::runtime_error(what) {}
};

}  // namespace cdpmil
