#include "cli.hpp"

int main(int argc, char** argv) { return retrig::cli::dispatch(argc, argv); }
