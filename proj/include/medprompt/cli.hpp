#pragma once

// Command-line entry point. Subcommands: train, eval, translate, gradcheck,
// ablate. Returns 0 on success, 1 on usage errors (bad flags, bad config
// keys), 2 on runtime failures (missing files, numeric aborts).

namespace medprompt {

int run_cli(int argc, const char* const* argv);

}  // namespace medprompt
