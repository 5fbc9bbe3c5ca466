#pragma once

#include <stdexcept>
#include <string>

namespace hygen {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class ValidityError : public Error {
 public:
  using Error::Error;
};

/// Caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment or task configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Missing, malformed or inconsistent data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A dataset line could not be parsed; carries the 1-based line number.
class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what, const std::string& source = {})
      : DataError((source.empty() ? "" : source + ": ") + "line " + std::to_string(line) + ": " + what),
        line_(line),
        detail_(what) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::size_t line_;
  std::string detail_;
};

}  // namespace hygen
