#include "dwstrack/cli.hpp"

int main(int argc, char** argv) { return dwstrack::cli::run_cli(argc, argv); }
