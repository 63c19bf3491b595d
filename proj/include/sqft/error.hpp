// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sqft {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand dimensions do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration: rank outside its space, missing mask for a mode, bad flag value.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Non-finite values in inputs or outputs.
class DataError : public Error {
public:
    using Error::Error;
};

/// A merge or pipeline invariant would be violated (the operation is refused).
class InvariantError : public Error {
public:
    using Error::Error;
};

/// Malformed checkpoint bytes. Carries the byte offset and, when known, the tensor name.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::uint64_t offset, std::string tensor = {})
        : Error(what), offset_(offset), tensor_(std::move(tensor)) {}

    std::uint64_t offset() const noexcept { return offset_; }
    const std::string& tensor() const noexcept { return tensor_; }

private:
    std::uint64_t offset_;
    std::string tensor_;
};

/// Fine-tuning diverged; the per-epoch loss history up to the failure is attached.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, std::vector<double> history)
        : Error(what), history_(std::move(history)) {}

    const std::vector<double>& history() const noexcept { return history_; }

private:
    std::vector<double> history_;
};

}  // namespace sqft
