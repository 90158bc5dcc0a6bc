#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace va3::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDataError = 1;
inline constexpr int kExitUsage = 2;

/// Runs one command line. `args[0]` is the program name.
///
/// Usage errors go to `err` with exit 2. Data and validation errors print a
/// JSON object {"error", "message", "graph_id"} on `out` and exit 1.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace va3::cli
