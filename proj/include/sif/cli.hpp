#pragma once

#include <ostream>

namespace sif {

// Exit codes: 0 ok, 1 runtime failure, 2 usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sif
