#pragma once

#include <stdexcept>
#include <string>

namespace calm {

/// Shape or extent disagreement between operands.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Index outside the addressed extent.
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Violated call contract (non-scalar loss, misconfigured layer, ...).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid run configuration; the message lists every violated constraint.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed, truncated or version-mismatched container file.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A tensor value became NaN/Inf while checked mode was active.
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Numerical-stability refusal (e.g. a solver step-size constraint).
struct StabilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace calm
