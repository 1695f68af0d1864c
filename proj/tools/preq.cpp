#include "preq/cli.hpp"

int main(int argc, char** argv) { return preq::cli::run(argc, argv); }
