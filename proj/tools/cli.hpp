#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace retrig::cli {

enum ExitCode : int {
    kOk = 0,
    kUsage = 1,
    kDataError = 2,
    kBackendError = 3,
    kJailbreakFound = 4,
};

// Runs one command line. args[0] is the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv);

}  // namespace retrig::cli
