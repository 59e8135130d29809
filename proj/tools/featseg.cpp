#include "featseg/cli.hpp"

int main(int argc, char** argv) { return featseg::run(argc, argv); }
