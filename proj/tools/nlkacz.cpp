#include <iostream>

#include "nlkacz/cli/commands.hpp"

int main(int argc, char** argv) { return nlkacz::cli::run_cli(argc, argv, std::cout, std::cerr); }
