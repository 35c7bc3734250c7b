#include "cli.hpp"

int main(int argc, char** argv) { return cotunet::cli::run(argc, argv); }
