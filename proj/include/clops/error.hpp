#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace clops {

/// Malformed input text (XML, JSON, CSV). Carries the location when known.
class ParseError : public std::runtime_error {
public:
  ParseError(const std::string& what, std::size_t line = 0, std::size_t column = 0)
      : std::runtime_error(line == 0 ? what
                                     : what + " (line " + std::to_string(line) + ", column " +
                                           std::to_string(column) + ")"),
        line_(line), column_(column) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

private:
  std::size_t line_;
  std::size_t column_;
};

/// A document that parses but is missing or mistyping a required field.
class SchemaError : public std::runtime_error {
public:
  SchemaError(const std::string& field, const std::string& what)
      : std::runtime_error("schema: " + field + ": " + what), field_(field) {}

  const std::string& field() const noexcept { return field_; }

private:
  std::string field_;
};

/// Structurally valid input that breaks a domain invariant.
class ValidationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Internal consistency failure inside a running simulation.
class SimulationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Detection times that no physically plausible trajectory can connect.
class InfeasibleTraceError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

/// A persisted record whose contents do not match its manifest or checksum.
class IntegrityError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace clops
