#include "qgate/cli.hpp"

int main(int argc, char** argv) { return qgate::run_cli(argc, argv); }
