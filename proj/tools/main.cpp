#include "gridnet/cli.hpp"

int main(int argc, char** argv) { return gridnet::run_cli(argc, argv); }
