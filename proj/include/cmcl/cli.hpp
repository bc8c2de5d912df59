#pragma once

#include <iosfwd>

namespace cmcl {

inline constexpr const char* kVersion = "0.1.0";

// Runs one subcommand. Returns 0 on success, 1 on validation or usage errors
// and 2 on numerical failure.
int dispatch(int argc, const char* const* argv);
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cmcl
