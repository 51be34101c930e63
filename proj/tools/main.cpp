#include "mptq/cli.hpp"

int main(int argc, char** argv) { return mptq::cli_main(argc, argv); }
