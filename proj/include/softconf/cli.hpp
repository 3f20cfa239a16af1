#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace softconf::cli {

/// Process exit status per failure class.
enum class ExitCode : int {
    ok = 0,
    failure = 1,
    config = 2,
    io = 3,
    numerical = 4,
};

/// Runs one verb. `args` excludes the program name, e.g. {"gen-head", "--k", "3"}.
/// Artifacts go to --out-dir, else $SOFTCONF_OUT_DIR, else ./softconf-out.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Registered verb names in display order.
std::vector<std::string> verb_names();

}  // namespace softconf::cli
