#include "vspad/cli.hpp"

int main(int argc, char** argv) { return vspad::cli::cli_dispatch(argc, argv); }
