#include "f4d/cli_io.hpp"

#include <iostream>

int main(int argc, char** argv) {
    return f4d::run_cli(argc, argv, std::cout, std::cerr);
}
