#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace hysense {

// Base of every error raised by the library. The process exit code used by
// the command line tool is derived from the concrete type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, degenerate statistics, diverging losses.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Invalid labels, impossible stratification, undefined metric columns.
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Corrupt or unrecognised checkpoint bytes.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A strict checkpoint load found tensors that do not line up with the model.
class IncompatibleError : public Error {
 public:
  IncompatibleError(const std::string& what, std::vector<std::string> offenders)
      : Error(what), offenders_(std::move(offenders)) {}
  const std::vector<std::string>& offenders() const noexcept { return offenders_; }

 private:
  std::vector<std::string> offenders_;
};

// Calls made in the wrong order, e.g. backward without a cached forward.
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace hysense
