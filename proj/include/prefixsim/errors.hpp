#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace prefixsim {

/// Invalid or mutually inconsistent configuration values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A numeric argument is outside the domain of a formula.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Data that parsed but violates an invariant (e.g. decreasing arrivals).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input; carries the 1-based line number of the offending record.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// The KV cache cannot free enough tokens even after evicting everything unpinned.
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The queueing approximation is unstable (utilization at or above one).
class InstabilityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace prefixsim
