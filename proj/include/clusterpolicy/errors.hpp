#pragma once

#include <stdexcept>
#include <string>

namespace clusterpolicy {

/// Malformed input data or broken type invariants.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A propensity fell outside [eta, 1-eta]. Never clipped, always raised.
struct PositivityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Model fitting failed (separation, non-convergence, singular design).
struct FitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ValidationError(msg);
}

}  // namespace detail

}  // namespace clusterpolicy
