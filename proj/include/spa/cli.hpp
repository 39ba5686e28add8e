#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace spa {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitOrdering = 3;

/// Runs one `spa` command line. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spa
