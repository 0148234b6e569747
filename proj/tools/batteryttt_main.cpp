#include "bttt/cli.hpp"

int main(int argc, char** argv) { return bttt::cli::run_cli(argc, argv); }
