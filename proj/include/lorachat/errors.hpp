// Copyright (c) 2026 lorachat contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace lorachat {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor shape / dimensionality mismatch. Message names the offending shapes.
struct ShapeError : Error {
    using Error::Error;
};

/// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

/// Out-of-range index (token ids, targets).
struct IndexError : Error {
    using Error::Error;
};

/// Sequence longer than the model window.
struct LengthError : Error {
    using Error::Error;
};

/// Invalid configuration value or combination.
struct ConfigError : Error {
    using Error::Error;
};

/// Malformed input that failed to parse (JSON lines, judge verdicts).
struct ParseError : Error {
    using Error::Error;
};

/// Structurally valid input with missing or mistyped fields.
struct SchemaError : Error {
    using Error::Error;
};

/// Corrupt or unsupported checkpoint container.
struct FormatError : Error {
    using Error::Error;
};

/// Artifacts that do not belong together (adapter vs. base model).
struct CompatibilityError : Error {
    using Error::Error;
};

/// Filesystem failure.
struct IoError : Error {
    using Error::Error;
};

/// Invalid user-facing input (empty chat message, missing answer).
struct InputError : Error {
    using Error::Error;
};

/// Network / judge endpoint failure; retried by the eval harness.
struct TransportError : Error {
    using Error::Error;
};

/// Aggregation attempted over samples that still lack verdicts.
struct IncompleteError : Error {
    using Error::Error;
};

}  // namespace lorachat
