#pragma once

namespace ssf {

// Full command-line entry point; returns the process exit code
// (0 success, 1 usage error, 2 runtime failure).
int run_cli(int argc, const char* const* argv);

}  // namespace ssf
