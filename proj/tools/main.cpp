#include "dualtta/experiment.hpp"

int main(int argc, char** argv) { return dualtta::bench::cli_dispatch(argc, argv); }
