// SPDX-License-Identifier: Apache-2.0
//
// `textprune` command line. Exit codes: 0 success, 2 usage or config error,
// 3 runtime or I/O error.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace textprune::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace textprune::cli
