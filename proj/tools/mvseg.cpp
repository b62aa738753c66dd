#include "mvseg/cli.hpp"

int main(int argc, char** argv) { return mvseg::cli::run(argc, argv); }
