#include <iostream>

#include "motionkit/cli.hpp"

int main(int argc, char** argv) { return motionkit::run(argc, argv, std::cout, std::cerr); }
