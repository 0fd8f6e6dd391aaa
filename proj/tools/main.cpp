#include <iostream>

#include "rmfat/cli.hpp"

int main(int argc, char** argv) { return rmfat::run_cli(argc, argv, std::cout, std::cerr); }
