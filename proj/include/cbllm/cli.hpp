#pragma once

#include <ostream>

namespace cbllm {

// Entry point of the `cbllm` command line tool.
//
//   cbllm <command> [--config FILE.json] [flags...]
//
// Commands: synth, score, train-cls, explain, unlearn, train-gen, generate,
// steer, eval, report-neurons, serve (see `cbllm <command> --help`). A config
// file is a flat JSON object whose keys are the command's long flag names
// without dashes; flags given on the command line win over it.
//
// The result JSON goes to `out` (or to --out FILE), progress and loss traces
// to `err`. Exit codes: 0 success, 1 usage or validation error (including an
// unknown flag, which also prints the usage text), 2 runtime fault.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cbllm
