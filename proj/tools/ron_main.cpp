#include "ron/cli.hpp"

int main(int argc, char** argv) { return ron::run_cli(argc, argv); }
