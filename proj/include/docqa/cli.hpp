#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace docqa::cli {

inline constexpr const char* kVersion = "0.1.0";

/// Exit codes: 0 success, 1 domain error, 2 usage error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

/// Runs one command line. `args` excludes the program name. Machine output
/// (JSON or JSON lines) goes to `out`, diagnostics to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace docqa::cli
