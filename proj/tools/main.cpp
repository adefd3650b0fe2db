#include "medprompt/cli.hpp"

int main(int argc, char** argv) { return medprompt::run_cli(argc, argv); }
