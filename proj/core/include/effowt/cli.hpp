#pragma once

namespace effowt {

/// Entry point behind the `effowt` binary; returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace effowt
