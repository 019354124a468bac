// mmsn/errors.hpp — error taxonomy shared across the library and the CLI.
#pragma once

#include <stdexcept>
#include <string>

namespace mmsn {

// Caller broke a documented precondition (shape mismatch, bad handle, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Invalid configuration value (lr <= 0, p outside [0,1], unknown key, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A computation produced NaN/Inf or diverged.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed input file (bad JSON, bad magic, truncated binary).
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

// Well-formed file whose contents violate a data invariant.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem failure (unwritable directory, missing file).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mmsn
