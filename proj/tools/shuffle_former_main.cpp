#include <iostream>
#include <string>
#include <vector>

#include "shuffle_former/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return shuffle_former::run_cli(args, std::cout, std::cerr);
}
