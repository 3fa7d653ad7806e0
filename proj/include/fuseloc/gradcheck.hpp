#pragma once

#include <functional>

#include "fuseloc/tensor.hpp"

namespace fuseloc {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Scalar-valued function of one tape variable.
using TapeFunction = std::function<Var(Tape&, Var)>;

/// Compares the tape gradient of f at x against central differences.
/// Error per coordinate is |a - c| / max(|a|, |c|, 1e-8); the maximum is
/// reported. eps is intended to lie in [1e-7, 1e-3]; larger steps are accepted
/// and simply produce larger truncation error. Throws NumericError when f
/// evaluates to NaN.
GradCheckResult finite_difference_check(const TapeFunction& f, const Shape& shape, std::span<const double> x,
                                        double eps = 1e-6, Precision precision = Precision::f64);

/// Same check for a persistent parameter read by `loss`. When max_coords is
/// nonzero only that many evenly spaced coordinates are perturbed.
GradCheckResult check_parameter_gradient(const std::function<Var(Tape&)>& loss, Parameter& p, double eps = 1e-6,
                                         std::size_t max_coords = 0);

}  // namespace fuseloc
