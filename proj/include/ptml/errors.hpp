// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ptml {

// Shape/dimension mismatches and invalid structural arguments.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced by an operation; message names the originating op.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed serialized data (bad magic, reserved bits, hash mismatch).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad command-line / config usage. CLI maps this to exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace ptml
