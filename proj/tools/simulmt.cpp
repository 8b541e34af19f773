#include "simulmt/cli.hpp"

int main(int argc, char** argv) { return simulmt::cli::dispatch(argc, argv); }
