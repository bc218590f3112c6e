#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace aspun::cli {

enum ExitCode : int {
    ok = 0,
    failure = 1,
    usage_error = 2,
    format_error = 3,
    numerical_failure = 4,
};

/// Runs one invocation; argv[0] is the program name. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Prints 4-decimal fixed point, or "inf" / "-inf" / "nan".
std::string metric(double v);

}  // namespace aspun::cli
