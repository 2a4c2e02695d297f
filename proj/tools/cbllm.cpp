#include <iostream>

#include "cbllm/cli.hpp"

int main(int argc, char** argv) { return cbllm::run_cli(argc, argv, std::cout, std::cerr); }
