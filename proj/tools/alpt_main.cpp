#include <string>
#include <vector>

#include "alpt/cli.hpp"

int main(int argc, char** argv) {
  return alpt::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
