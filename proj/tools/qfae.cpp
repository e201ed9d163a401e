#include <iostream>

#include "qfae/cli.hpp"

int main(int argc, char** argv) { return qfae::cli::run_command(argc, argv, std::cout, std::cerr); }
