#pragma once

#include <stdexcept>
#include <string>

namespace lmtc {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad user-facing configuration or usage. CLI exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

// Operand dimensions incompatible with the requested operation.
struct ShapeError : Error {
    using Error::Error;
};

// Out-of-range index (e.g. token id beyond vocabulary).
struct IndexError : Error {
    using Error::Error;
};

// Input sequence longer than the encoder can represent.
struct LengthError : Error {
    using Error::Error;
};

// Non-finite values or otherwise broken numerics. CLI exit code 3.
struct NumericError : Error {
    using Error::Error;
};

// Filesystem / parsing failures. CLI exit code 4.
struct IoError : Error {
    using Error::Error;
};

// API misuse (violated precondition that is not a config problem).
struct ContractError : Error {
    using Error::Error;
};

}  // namespace lmtc
