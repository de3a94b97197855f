#include "latent_atlas/cli.hpp"

int main(int argc, char** argv) { return latent_atlas::cli::run_cli(argc, argv); }
