#include <string>
#include <vector>

#include "segot/cli_app.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return segot::cli::run(args);
}
