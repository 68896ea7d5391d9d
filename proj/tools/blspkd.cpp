#include "blspkd/cli/commands.hpp"

int main(int argc, char** argv) { return blspkd::cli::main_entry(argc, argv); }
