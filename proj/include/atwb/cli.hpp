#pragma once

#include <filesystem>

namespace atwb::cli {

enum ExitCode : int { kSuccess = 0, kValidationError = 1, kRuntimeError = 2 };

// Entry point behind the `atwb` executable. Subcommands: synth, train,
// attack, evaluate, explain, report. Progress goes to stderr; results go to files.
int run(int argc, const char* const* argv);

// $ATWB_OUTPUT_ROOT when set and non-empty, otherwise "atwb-out".
std::filesystem::path output_root();

}  // namespace atwb::cli
