#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace latent_forge::cli {

/// Runs one `latent-forge` invocation; args excludes the program name.
/// Returns 0 on success, 1 on validation or usage errors, 2 on runtime errors.
int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

int run(int argc, const char* const* argv);

}  // namespace latent_forge::cli
