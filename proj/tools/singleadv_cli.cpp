#include <iostream>
#include <string>
#include <vector>

#include "singleadv/app.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return singleadv::run_cli(args, std::cout, std::cerr);
}
