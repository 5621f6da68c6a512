#include "cli.hpp"

int main(int argc, char** argv) { return latent_forge::cli::run(argc, argv); }
