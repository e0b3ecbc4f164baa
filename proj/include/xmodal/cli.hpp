#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace xmodal {

// Entry point for the xmodal tool. args excludes the program name.
// Returns 0 on success, 1 on usage/config/validation errors, 2 on runtime
// failures (non-finite losses, I/O, failed gradient checks). Progress goes to
// `err`; artifacts go under --out only.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace xmodal
