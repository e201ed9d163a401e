#pragma once

#include <ostream>
#include <string>

namespace qfae::cli {

enum ExitCode : int { kOk = 0, kRuntime = 1, kUsage = 2, kValidation = 3 };

/// Runs one subcommand. Failures print a single `qfae: error[<category>]: ...`
/// line to err.
int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace qfae::cli
