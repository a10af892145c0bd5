#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ilu {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad argument, shape or precondition violation.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Basis vectors of a projection are collinear or zero.
class DegenerateBasisError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

// Non-finite value produced or consumed.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed binary file (checkpoint).
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Malformed text record; line numbers are 1-based.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Well-formed record violating a data invariant.
class ValidationError : public Error {
 public:
  ValidationError(const std::string& what, std::size_t line, std::string field)
      : Error("line " + std::to_string(line) + ", field '" + field + "': " + what),
        line_(line),
        field_(std::move(field)) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

#define ILU_REQUIRE(cond, msg)                    \
  do {                                            \
    if (!(cond)) throw ::ilu::ArgumentError(msg); \
  } while (false)

}  // namespace ilu
