#pragma once

#include <stdexcept>
#include <string>

namespace baffle {

// Base for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid model/run configuration (bad shapes, bad keys, violated invariants).
// Mapped to CLI exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

// Non-finite values encountered during computation. Mapped to CLI exit code 3.
struct NumericError : Error {
    using Error::Error;
};

// Malformed protocol traffic (missing/duplicate uploads, length mismatches).
struct ProtocolError : Error {
    using Error::Error;
};

// Request exceeds what this build is willing to compute (size guards,
// unsupported layer kinds).
struct CapabilityError : Error {
    using Error::Error;
};

// Dataset files that cannot be read or parsed.
struct IngestError : Error {
    using Error::Error;
};

} // namespace baffle
