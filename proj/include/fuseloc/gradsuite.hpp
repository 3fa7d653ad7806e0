#pragma once

// Finite-difference checks over every differentiable op, shared by the
// `gradcheck` command and the test suites.

#include <cstdint>
#include <string>
#include <vector>

#include "fuseloc/gradcheck.hpp"

namespace fuseloc {

struct GradSuiteEntry {
  std::string op;     // family, e.g. "gem"
  std::string check;  // e.g. "gem/p"
  GradCheckResult result;
  bool passed = false;
};

/// Op families in suite order.
std::vector<std::string> gradient_suite_ops();

/// Runs every check of the selected family ("" for all) in 64-bit.
/// Throws std::invalid_argument for an unknown family.
std::vector<GradSuiteEntry> run_gradient_suite(const std::string& op = "", double eps = 1e-5, double tolerance = 1e-5,
                                               std::uint64_t seed = 0);

}  // namespace fuseloc
