#include "sbreg/cli.hpp"

int main(int argc, char** argv) { return sbreg::run_cli(argc, argv); }
