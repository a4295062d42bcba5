#include "fildeep/cli.hpp"

int main(int argc, char** argv) { return fildeep::cli::run(argc, argv); }
