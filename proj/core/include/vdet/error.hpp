#pragma once

#include <stdexcept>
#include <string>

namespace vdet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value violates a documented precondition (NaN coordinates, zero-area box).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Inconsistent configuration: shape mismatch, unknown segment or scheme, bad hyper-parameter.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A binary or text file does not follow its documented layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Text parse failure; carries the 1-based line number.
class ParseError : public FormatError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : FormatError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A parsed value lies outside its allowed range (e.g. class id >= K).
class RangeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in the wrong order (backward before forward).
class StateError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced during a forward or backward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace vdet
