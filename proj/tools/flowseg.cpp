#include <iostream>

#include "flowseg/commands.hpp"

int main(int argc, char** argv) { return flowseg::cli::main(argc, argv, std::cout, std::cerr); }
