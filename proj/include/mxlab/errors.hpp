// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mxlab {

/// Bad numeric input: NaN into a NaN-free format, non-finite tensor elements, etc.
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A ratio whose denominator is zero (zeta bound, cosine of a zero vector).
class UndefinedRatio : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Scaling-law data that cannot identify the fit (no spread in N or D).
class IllPosedFit : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class ShapeMismatch : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Configuration error; `path()` names the offending key, e.g. "model.activation".
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string path, const std::string& what)
        : std::runtime_error(path + ": " + what), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace mxlab
