#include "omni_cli.hpp"

int main(int argc, char** argv) { return omni::cli::run_cli(std::vector<std::string>(argv, argv + argc)); }
