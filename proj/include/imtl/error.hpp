#pragma once

#include <stdexcept>
#include <string>

namespace imtl {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition of an operation was violated (bad mode index, shape mismatch, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Input data is unusable (non-finite values, single-class labels, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A factor column that must carry scale is exactly zero.
class DegenerateFactor : public Error {
 public:
  using Error::Error;
};

/// A normal-equation system could not be solved without stabilization.
class IllConditioned : public Error {
 public:
  using Error::Error;
};

/// Malformed file, manifest or configuration.
class FormatError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

}  // namespace detail
}  // namespace imtl
