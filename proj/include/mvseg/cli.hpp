#pragma once

// Command-line front end. Subcommands: phantom, preprocess, split, train,
// predict, evaluate, experiment, params.

#include <string>
#include <vector>

namespace mvseg::cli {

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kSubjectErrors = 1;  // ran to the end, some subjects failed
inline constexpr int kFailure = 2;        // bad usage, configuration or a failed stage

int run(int argc, const char* const* argv);

/// `args` excludes the program name.
int run(const std::vector<std::string>& args);

}  // namespace mvseg::cli
