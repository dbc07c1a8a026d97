#include "hdu/cli.hpp"

int main(int argc, char** argv) { return hdu::cli::run(argc, argv); }
