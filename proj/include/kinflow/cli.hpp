#pragma once

#include <iosfwd>

namespace kinflow::cli {

/// Runs the command line in-process. Returns the exit code: 0 ok, 2 usage,
/// 3 config, 4 io/format, 5 runtime. Errors are reported as a single line
/// "error <Kind>: <message>" on `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace kinflow::cli
