#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gfrrn::cli {

/// Exit codes: 0 success, 1 validation error (bad flags, config, unknown
/// subcommand), 2 runtime failure (I/O, numerics).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gfrrn::cli
