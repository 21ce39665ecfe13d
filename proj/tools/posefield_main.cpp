#include "posefield/cli.hpp"

int main(int argc, char** argv) { return posefield::run_cli(argc, argv); }
