#pragma once

namespace cedual::cli {

// Full command-line entry point (subcommand dispatch, stream discipline,
// exit-code mapping): 0 success, 1 partial failure (e.g. skipped generation
// lines) or internal error, 2 usage/config/input problems, 3 divergence.
int run(int argc, char** argv);

}  // namespace cedual::cli
