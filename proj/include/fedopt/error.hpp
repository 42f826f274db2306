#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedopt {

// Length or dimension mismatch between vectors, datasets or tasks.
struct StructuralError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Division by zero, negative second moment, non-finite result.
struct NumericError : std::domain_error {
  using std::domain_error::domain_error;
};

// Out-of-range hyperparameter or infeasible configuration.
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed input file (IDX, JSON config).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A run produced a non-finite iterate or an exploding loss.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::ptrdiff_t last_finite_round)
      : std::runtime_error(what), last_finite_round_(last_finite_round) {}

  // -1 when not even the initial iterate was finite.
  std::ptrdiff_t last_finite_round() const noexcept { return last_finite_round_; }

 private:
  std::ptrdiff_t last_finite_round_;
};

}  // namespace fedopt
