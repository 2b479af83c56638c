#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace lcv {

/// Belt speed outside the domain of the motion matrix.
class InvalidSpeed : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A caller broke an operation's precondition (bounds, sizes, indices).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Configuration document failed validation. `key()` is the offending path,
/// e.g. `stations[0].span`.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(key + ": " + what), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Malformed input stream (detections, controls, CSV). Carries a 1-based line.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace lcv
