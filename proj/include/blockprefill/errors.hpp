// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace blockprefill {

/// Malformed input to a single operation (shape mismatch, out-of-range index, ...).
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A combination of settings that cannot be executed (budget below protected set, misaligned blocks, ...).
class InvalidConfiguration : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Query issued against an object that is not ready for it (e.g. peak of an empty trace).
class InvalidState : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Caller broke an invariant the callee relies on (e.g. tried to evict a protected entry).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Non-finite values surfaced from a numeric kernel.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Config file / flag problems; the message carries the key path.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace blockprefill
