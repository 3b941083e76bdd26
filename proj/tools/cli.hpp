#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace rope_probe::cli {

// Stable exit codes for scripting.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitIo = 4;

// Runs one command. `args` excludes the program name. Diagnostics go to
// `err`, progress to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rope_probe::cli
