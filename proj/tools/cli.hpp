#pragma once

#include <iosfwd>
#include <span>
#include <string>

namespace cjlm {

// Runs one `cjlm` invocation; args excludes the program name. Errors are
// reported on `err` as a single "error: <kind>: <message>" line.
int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace cjlm
