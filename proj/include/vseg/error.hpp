#pragma once

#include <stdexcept>
#include <string>

namespace vseg {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf reached a place that requires finite values.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class DigestError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TrainingDiverged : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace vseg
