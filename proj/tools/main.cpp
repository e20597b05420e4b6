#include "cli.hpp"

int main(int argc, char** argv) { return qkin::cli::run(argc, argv); }
