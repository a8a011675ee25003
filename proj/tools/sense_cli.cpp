#include "sense/cli.hpp"

int main(int argc, char** argv) { return sense::cli::run(argc, argv); }
