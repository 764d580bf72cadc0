#include "mvmrf/cli_io.hpp"

int main(int argc, char** argv) { return mvmrf::cli_main(argc, argv); }
