#include "ssf/cli.hpp"

int main(int argc, char** argv) { return ssf::run_cli(argc, argv); }
