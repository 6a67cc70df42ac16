#include "dflm/cli.hpp"

int main(int argc, char** argv) { return dflm::cli::run(argc, argv); }
