#pragma once

#include <limits>
#include <stdexcept>
#include <string>

namespace ctdebias {

inline constexpr const char* version = "0.1.0";

/// Invalid configuration or malformed input. CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Numerical failure: singular gram matrix, rank-deficient constraints,
/// integrator breakdown. CLI exit code 3. Carries the persistency-of-excitation
/// statistic when the failure came from a gram inversion.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what,
                          double pe = std::numeric_limits<double>::quiet_NaN())
      : std::runtime_error(what), pe_stat(pe) {}
  double pe_stat;
};

/// Filesystem failure. CLI exit code 4.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ctdebias
