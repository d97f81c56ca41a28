#include <string>
#include <vector>

#include "questmf/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return questmf::dispatch(std::move(args));
}
