#include "lanerope/cli.hpp"

int main(int argc, char** argv) { return lanerope::cli::cli_main(argc, argv); }
