// Entry point behind the dqe executable.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error. Diagnostics go to
// `err`; tables and summaries go to `out`.

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dqe::cli {

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::string usage();

}  // namespace dqe::cli
