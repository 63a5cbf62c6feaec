#pragma once

#include <stdexcept>
#include <string>

namespace dnls {

/// Invalid or inconsistent configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Overflow, NaN, step-size underflow or solver non-convergence (exit code 4).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dnls
