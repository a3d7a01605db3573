#include "cli.hpp"

int main(int argc, char** argv) { return rangediff::cli::run_cli(argc, argv); }
