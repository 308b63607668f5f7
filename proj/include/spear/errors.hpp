// Error types shared across the library. The CLI maps these to exit codes:
// ConfigError -> 2, everything else -> 1.
#pragma once

#include <stdexcept>
#include <string>

namespace spear {

// Invalid or inconsistent configuration (bad file, bad key, violated bound).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A precondition of an operation was violated by the caller.
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

// Non-finite values or other numeric breakdowns.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace spear
