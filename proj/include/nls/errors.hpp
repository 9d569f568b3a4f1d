#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nls {

/// Base of every error raised by the library. The CLI maps subclasses onto
/// exit codes (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ConfigurationError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

/// No finite-difference Hessian was negative definite for any field.
class AdjustmentUnavailable : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Every surface value is -inf.
class NoValidPoint : public NumericError {
 public:
  using NumericError::NumericError;
};

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, std::size_t epoch)
      : NumericError(what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

/// 0 success, 2 configuration/argument error, 3 numeric error, 4 format error.
inline int exit_code(const Error& e) {
  if (dynamic_cast<const FormatError*>(&e)) return 4;
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  return 2;
}

}  // namespace nls
