// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cptlab::cli {

inline constexpr const char* kToolVersion = "0.1.0";

/// Runs one command line (without the program name). Failures print
/// "<ErrorClass>: <message>" as a single line on `err` and return nonzero:
/// 1 for library errors, 2 for usage errors, 3 for anything unexpected.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cptlab::cli
