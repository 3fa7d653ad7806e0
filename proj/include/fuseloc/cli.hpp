#pragma once

// The `fuseloc` command-line tool: gen-data, train, eval, diagnose, gradcheck.
//
// Exit codes: 0 ok, 2 invalid input or configuration, 3 numeric failure,
// 4 artifact mismatch (checkpoint vs. requested network), 1 anything else.

#include <iosfwd>

namespace fuseloc {

enum ExitCode { kExitOk = 0, kExitError = 1, kExitValidation = 2, kExitNumeric = 3, kExitArtifact = 4 };

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fuseloc
