#pragma once

#include <iostream>

namespace mptq {

/// Entry point of the `mptq` tool. Returns 0 on success, 1 when a pipeline
/// stage fails and 2 on a usage error. Diagnostics go to `err`, summaries to
/// `out`.
int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace mptq
