#include <string>
#include <vector>

#include "crossret/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return crossret::cli::run(args);
}
