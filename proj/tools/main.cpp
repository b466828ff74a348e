#include "commands.hpp"

int main(int argc, char** argv) { return hetpref::cli::run(argc, argv); }
