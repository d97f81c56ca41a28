#pragma once

#include <string>
#include <vector>

namespace questmf {

// Runs one command-line invocation (argv without the program name).
// Exit status: 0 success, 2 usage error (unknown verb or flag),
// 3 configuration error, 4 data error, 1 anything else.
int dispatch(std::vector<std::string> args);

}  // namespace questmf
