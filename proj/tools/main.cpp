#include <iostream>

#include "fuseloc/cli.hpp"

int main(int argc, char** argv) { return fuseloc::run_cli(argc, argv, std::cout, std::cerr); }
