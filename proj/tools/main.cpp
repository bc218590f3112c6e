#include <iostream>
#include <string>
#include <vector>

#include "aspun/cli.hpp"

int main(int argc, char** argv) {
    return aspun::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
