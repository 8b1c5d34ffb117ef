#pragma once

#include <string>
#include <vector>

namespace jointpo::cli {

enum ExitCode : int {
    kSuccess = 0,
    kInternal = 1,
    kValidation = 2,
    kIdentification = 3,
    kInference = 4,
};

struct CliResult {
    int exit_code = kSuccess;
    std::string out;
    std::string err;
};

/// Runs one command line (without the program name) and captures its streams.
CliResult run_cli(const std::vector<std::string>& args);

}  // namespace jointpo::cli
