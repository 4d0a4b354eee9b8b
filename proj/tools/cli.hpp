#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tsmon/calibration.hpp"

namespace tsmon::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,     ///< unexpected internal error
    kUsage = 2,       ///< bad flags, bad config file, malformed input data
    kInfeasible = 3,  ///< calibration could not meet its target
    kIo = 4,          ///< missing or unwritable file
};

/// Environment variable naming the default output directory.
inline constexpr const char* kOutDirEnv = "TSMON_OUT_DIR";

/// Runs one subcommand. args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Limits for k = 0.25 at the tabulated (m, IC-ARL) settings, if any.
std::optional<CalibrationResult> reference_limits(std::size_t m, double ic_arl);

} // namespace tsmon::cli
