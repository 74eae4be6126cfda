#include <iostream>

#include "fabme/cli.hpp"

int main(int argc, char** argv) { return fabme::cli::run(argc, argv, std::cout, std::cerr); }
