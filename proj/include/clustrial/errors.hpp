#pragma once

#include <stdexcept>
#include <string>

namespace clustrial {

/// Invalid or inconsistent input data (CSV contents, dataset invariants).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration (scenario files, CLI options, schema mappings).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure during model fitting.
struct FitError : std::runtime_error {
    explicit FitError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace clustrial
