#pragma once

namespace escape {

// Entry point for the `escape` tool. Exit codes: 0 success, 1 failed
// acceptance check, 2 usage error.
int run_cli(int argc, char** argv);

}  // namespace escape
