#include "rlfr/cli.hpp"

int main(int argc, char** argv) { return rlfr::cli::main(argc, argv); }
