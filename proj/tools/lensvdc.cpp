#include "lensvdc/cli.hpp"

int main(int argc, char** argv) { return lensvdc::cli::run(argc, argv); }
