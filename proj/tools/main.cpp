#include <iostream>

#include "kinflow/cli.hpp"

int main(int argc, char** argv) { return kinflow::cli::run_cli(argc, argv, std::cout, std::cerr); }
