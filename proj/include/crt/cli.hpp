#pragma once

namespace crt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;    // bad config, flags or input files
inline constexpr int kExitRuntime = 3;  // failure after validation succeeded

/// Entry point of the `crt` tool: train | transfer | chain | certify | report.
int run(int argc, char** argv);

}  // namespace crt::cli
