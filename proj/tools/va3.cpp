#include <iostream>
#include <string>
#include <vector>

#include "va3/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return va3::cli::run(args, std::cout, std::cerr);
}
