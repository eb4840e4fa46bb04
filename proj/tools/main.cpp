#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) { return textsettr::cli::run(argc, argv, std::cerr); }
