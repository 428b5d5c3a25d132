#include "muteswap/cli.hpp"

int main(int argc, char** argv) { return muteswap::cli::run(argc, argv); }
