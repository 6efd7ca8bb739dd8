#pragma once

#include <stdexcept>
#include <string>

namespace lmdet {

// Base class for all library errors. The CLI maps subclasses to exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor rank/dimension contract violations.
struct ShapeError : Error {
    using Error::Error;
};

// Unreadable or inconsistent user-supplied data (files, CSV rows, configs).
struct DataError : Error {
    using Error::Error;
};

// Non-finite values, divergence, failed gradient checks.
struct NumericError : Error {
    using Error::Error;
};

// Filesystem failures (unreadable path, short write, checksum mismatch).
struct IoError : Error {
    using Error::Error;
};

}  // namespace lmdet
