#include "bwnh/cli.hpp"

int main(int argc, char** argv) { return bwnh::run(argc, argv); }
