#pragma once

#include <stdexcept>
#include <string>

namespace privlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer shape does not match what an operation expects.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An argument violates a documented precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Unknown or inconsistent configuration (bad tag, bad key, bad plan).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. Carries the byte offset (or line) where parsing stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Federation protocol violation (e.g. aggregating nothing).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Input is well-formed but statistically or numerically degenerate.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

}  // namespace privlab
