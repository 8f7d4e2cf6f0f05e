#include <iostream>
#include <vector>

#include "weakseg/commands.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return weakseg::run_cli(std::move(args), std::cout, std::cerr);
}
