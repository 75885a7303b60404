#pragma once

#include <ostream>

namespace viti::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIncompatible = 3;

inline constexpr int kReportFormatVersion = 1;

/// Parses argv, resolves the run config (flags > --config file > defaults)
/// and runs one subcommand. Never throws; returns the process exit status.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace viti::cli
