#include "revode/cli.hpp"

int main(int argc, char** argv) {
  return revode::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
