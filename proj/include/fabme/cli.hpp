#pragma once

#include <ostream>

namespace fabme::cli {

/// Runs one subcommand. Summaries go to `out`, diagnostics to `err`; every
/// run writes a CSV result file (--result). Returns 0 on success, 1 otherwise.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fabme::cli
