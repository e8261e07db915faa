#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ultraad {

// Entry point of the `ultraad` tool. args excludes the program name.
// Returns the process exit code: 0 success, 1 runtime failure, 2 usage or
// path errors.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ultraad
