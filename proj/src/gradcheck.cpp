#include "fuseloc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace fuseloc {

namespace {

double finite_or_throw(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("gradient check: ") + what + " is not finite");
  return v;
}

void update(GradCheckResult& r, std::size_t i, double a, double c) {
  const double denom = std::max({std::abs(a), std::abs(c), 1e-8});
  const double err = std::abs(a - c) / denom;
  if (err > r.max_relative_error || (i == 0 && r.max_relative_error == 0.0)) {
    r.max_relative_error = err;
    r.worst_index = i;
    r.analytic = a;
    r.numeric = c;
  }
}

}  // namespace

GradCheckResult finite_difference_check(const TapeFunction& f, const Shape& shape, std::span<const double> x,
                                        double eps, Precision precision) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_check: eps must be positive");
  if (x.size() != numel(shape)) throw ShapeError("finite_difference_check", "all", "value count does not match shape");

  std::vector<double> analytic;
  {
    Tape tape(precision);
    Var xv = tape.variable(shape, {x.begin(), x.end()});
    Var y = f(tape, xv);
    finite_or_throw(y.item(), "function value");
    tape.backward(y);
    auto g = xv.grad();
    analytic.assign(x.size(), 0.0);
    if (!g.empty()) std::copy(g.begin(), g.end(), analytic.begin());
  }

  auto eval = [&](const std::vector<double>& point) {
    Tape tape(precision);
    Var xv = tape.constant(shape, point);
    return finite_or_throw(f(tape, xv).item(), "function value");
  };

  GradCheckResult result;
  std::vector<double> point(x.begin(), x.end());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = point[i];
    point[i] = orig + eps;
    const double up = eval(point);
    point[i] = orig - eps;
    const double down = eval(point);
    point[i] = orig;
    update(result, i, finite_or_throw(analytic[i], "analytic gradient"), (up - down) / (2.0 * eps));
  }
  return result;
}

GradCheckResult check_parameter_gradient(const std::function<Var(Tape&)>& loss, Parameter& p, double eps,
                                         std::size_t max_coords) {
  if (!(eps > 0.0)) throw std::invalid_argument("check_parameter_gradient: eps must be positive");
  const std::vector<double> saved_grad = p.grad;
  std::fill(p.grad.begin(), p.grad.end(), 0.0);
  {
    Tape tape(Precision::f64);
    Var y = loss(tape);
    finite_or_throw(y.item(), "loss value");
    tape.backward(y);
  }
  const std::vector<double> analytic = p.grad;
  p.grad = saved_grad;

  auto eval = [&] {
    Tape tape(Precision::f64);
    return finite_or_throw(loss(tape).item(), "loss value");
  };

  std::vector<std::size_t> coords;
  const std::size_t n = p.value.size();
  if (max_coords == 0 || max_coords >= n) {
    for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
  } else {
    for (std::size_t k = 0; k < max_coords; ++k) coords.push_back(k * n / max_coords);
  }

  GradCheckResult result;
  for (std::size_t i : coords) {
    const double orig = p.value[i];
    p.value[i] = orig + eps;
    const double up = eval();
    p.value[i] = orig - eps;
    const double down = eval();
    p.value[i] = orig;
    update(result, i, finite_or_throw(analytic[i], "analytic gradient"), (up - down) / (2.0 * eps));
  }
  return result;
}

}  // namespace fuseloc
