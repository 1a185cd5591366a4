#include <iostream>
#include <string>
#include <vector>

#include "slimrec/pipeline.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return slimrec::dispatch(std::move(args), std::cout, std::cerr);
}
