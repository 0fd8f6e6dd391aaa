#pragma once
// Command-line front end: synth, train, restore, eval, slice.
//
// Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

#include <iosfwd>

namespace rmfat {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rmfat
