#ifndef STYLEEQ_TOOLS_CLI_HPP
#define STYLEEQ_TOOLS_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace styleeq::cli {

enum ExitCode : int {
  kOk = 0,
  kRuntimeFailure = 1,
  kUsageError = 2,
  kValidationError = 3,
  kThresholdFailure = 4,
  kMissingInput = 5,
};

/// Runs one command line (without the program name) and returns its exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace styleeq::cli

#endif  // STYLEEQ_TOOLS_CLI_HPP
