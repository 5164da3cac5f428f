#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace invarnet::cli {

// Exit statuses.
inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;  // verify failures and unexpected errors
inline constexpr int kConfigError = 2;
inline constexpr int kDataError = 3;
inline constexpr int kNumericalError = 4;
inline constexpr int kGuardError = 5;

// Runs one subcommand; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace invarnet::cli
