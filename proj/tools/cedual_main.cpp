#include "cedual/cli.hpp"

int main(int argc, char** argv) { return cedual::cli::run(argc, argv); }
