#pragma once

#include <iosfwd>

namespace vspad::cli {

/// Runs one subcommand. Exit codes: 0 success, 1 runtime error,
/// 2 usage error (usage text written to err).
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int cli_dispatch(int argc, const char* const* argv);

}  // namespace vspad::cli
