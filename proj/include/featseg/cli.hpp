#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace featseg {

/// Runs one featseg command. args excludes the program name. JSON summary
/// goes to `out`, diagnostics and usage to `err`.
/// Exit codes: 0 success, 1 validation error, 2 I/O or format error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, char** argv);

}  // namespace featseg
