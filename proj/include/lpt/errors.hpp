#pragma once

#include <stdexcept>
#include <string>

namespace lpt {

/// Invalid or inconsistent configuration (bad flag, bad config file, bad
/// hyper-parameter combination). The CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Runtime failure while processing data (unreadable file, malformed
/// manifest row, non-finite loss). The CLI maps this to exit code 1.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace lpt
