#include <iostream>

#include "safeatt/cli.hpp"

int main(int argc, char** argv) { return safeatt::cli::run_cli(argc, argv, std::cout, std::cerr); }
