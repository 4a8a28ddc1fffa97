#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpe {

// Validation failures (bad user input, malformed files, contract violations
// detectable before any computation). CLI maps these to exit code 1.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failures during computation (numeric blow-ups, degenerate estimators,
// training divergence). CLI maps these to exit code 2.
class ComputeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public InvalidInput {
 public:
  ParseError(const std::string& msg, long line)
      : InvalidInput(msg + " (line " + std::to_string(line) + ")"), line(line) {}
  long line;
};

class SchemaError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

class ShapeError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

class IndexError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

class SequenceFormatError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

class NumericError : public ComputeError {
 public:
  NumericError(const std::string& msg, long index = -1)
      : ComputeError(index >= 0 ? msg + " (index " + std::to_string(index) + ")" : msg),
        index(index) {}
  long index;
};

class DegenerateRatioError : public ComputeError {
 public:
  DegenerateRatioError(const std::string& msg, int step, int trajectory = -1)
      : ComputeError(msg + " (step " + std::to_string(step) +
                     (trajectory >= 0 ? ", trajectory " + std::to_string(trajectory) : "") + ")"),
        step(step),
        trajectory(trajectory) {}
  int step;
  int trajectory;
};

class UninitializedEstimator : public ComputeError {
 public:
  using ComputeError::ComputeError;
};

class OracleScaleError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

// Divergent training; carries the last finite parameter vector seen.
class TrainingFailure : public ComputeError {
 public:
  TrainingFailure(const std::string& msg, std::vector<double> last_params)
      : ComputeError(msg), last_finite_params(std::move(last_params)) {}
  std::vector<double> last_finite_params;
};

// Shortest decimal representation that round-trips the exact double.
std::string format_double(double v);

// Standard normal CDF.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// Deterministic pairwise reduction; summation order depends only on length.
double pairwise_sum(std::span<const double> xs);

constexpr double kDefaultSigmaFloor = 1e-3;  // variance floor 1e-6

}  // namespace dpe
