#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace atwb {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid argument or configuration value.
class ValueError : public Error {
 public:
  using Error::Error;
};

// Extent mismatch between operands; names the offending axis.
class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const std::string& axis, std::size_t expected,
             std::size_t actual)
      : Error(op + ": mismatch on axis " + axis + " (expected " + std::to_string(expected) +
              ", got " + std::to_string(actual) + ")"),
        axis_(axis) {}
  ShapeError(const std::string& op, const std::string& message)
      : Error(op + ": " + message) {}

  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed persisted data.
class FormatError : public Error {
 public:
  using Error::Error;
};

class CorruptHeaderError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  TruncatedError(const std::string& entry, const std::string& detail)
      : FormatError("truncated data in entry '" + entry + "': " + detail), entry_(entry) {}

  const std::string& entry() const noexcept { return entry_; }

 private:
  std::string entry_;
};

class DuplicateNameError : public FormatError {
 public:
  explicit DuplicateNameError(const std::string& name)
      : FormatError("duplicate entry name '" + name + "'"), name_(name) {}

  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace atwb
