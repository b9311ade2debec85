#include "escape/cli.hpp"

int main(int argc, char** argv) { return escape::run_cli(argc, argv); }
