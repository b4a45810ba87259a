#pragma once

#include <stdexcept>
#include <string>

namespace nestcert {

/// Malformed or out-of-schema input. The CLI maps this to exit code 2.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Input is well formed but outside the domain of the theory (e.g. a
/// non-positive coupling constant).
struct NotApplicable : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Integration or solver breakdown. `t_last` is the last time reached.
struct NumericalError : std::runtime_error {
    NumericalError(const std::string& what, double t = 0.0) : std::runtime_error(what), t_last(t) {}
    double t_last;
};

}  // namespace nestcert
