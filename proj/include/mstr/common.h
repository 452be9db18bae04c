#pragma once
// Shared error types and small helpers used across the library.

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mstr {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller broke an API precondition (shape mismatch, stale handle, closed
// stream, out-of-range index, ...).  These are bugs in the calling code.
struct ContractError : Error {
    using Error::Error;
};

// Input values outside the mathematical domain of an operation
// (log of a non-positive value, probabilities outside [0,1], ...).
struct DomainError : Error {
    using Error::Error;
};

// Bad run configuration: unknown key, unparsable value, invalid range.
struct ConfigError : Error {
    using Error::Error;
};

// Corrupt or mismatched files: bad magic, version, truncation, missing or
// unexpected tensor names.
struct IoError : Error {
    using Error::Error;
};

// Training produced a non-finite loss or gradient.
struct DivergenceError : Error {
    using Error::Error;
};

// A function that must be deterministic returned two different values for
// identical inputs (e.g. unfrozen noise inside a finite-difference check).
struct IndeterminacyError : Error {
    using Error::Error;
};

inline void check(bool ok, const std::string& msg) {
    if (!ok) throw ContractError(msg);
}

}  // namespace mstr
