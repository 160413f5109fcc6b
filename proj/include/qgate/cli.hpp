#pragma once

namespace qgate {

/// Process exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumerical = 4,
};

/// Entry point of the `qgate` tool: subcommands gen-data, train-teacher,
/// distill, calibrate, eval, grid and inspect.
int run_cli(int argc, const char* const* argv);

}  // namespace qgate
