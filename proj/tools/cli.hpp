#pragma once

#include <iosfwd>

namespace textsettr::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kMissingFile = 3,
  kInvalidConfig = 4,
  kRuntime = 5,
};

/// Parses argv, runs one subcommand and returns its exit code. Logs go to
/// `log`; nothing is written to the output paths unless the command succeeds.
int run(int argc, const char* const* argv, std::ostream& log);

}  // namespace textsettr::cli
