#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lmsode {

// Tensor dimensions do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A caller violated an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid configuration value or combination.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values, solver step budget exhausted, etc.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Integration failure; `row` is the first offending batch row (or npos).
class SolverError : public NumericError {
 public:
  SolverError(const std::string& what, std::size_t row) : NumericError(what), row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lmsode
