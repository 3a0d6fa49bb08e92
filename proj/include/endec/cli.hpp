#pragma once

// SPDX-License-Identifier: Apache-2.0

#include <iosfwd>
#include <string>
#include <vector>

namespace endec::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

/// Runs one invocation. `args` excludes the program name. Output goes to
/// --output when given, otherwise to `out`; diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace endec::cli
