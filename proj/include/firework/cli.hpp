// Command-line entry points: synth, train, register, evaluate, curve.
//
// Every subcommand accepts `--config FILE`, a flat key=value file whose keys
// are long option names. Flags given on the command line override the file.
// The resolved options are echoed next to each command's output.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace firework::cli {

// args excludes the program name. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace firework::cli
