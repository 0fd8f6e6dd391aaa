#pragma once

#include <stdexcept>
#include <string>

namespace rmfat {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or frame dimensions violate an operation's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Filesystem, image codec or checkpoint integrity failures.
class IoError : public Error {
public:
    using Error::Error;
};

/// Invalid parameter values or configuration documents.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A detector failed to produce a result.
class DetectorError : public Error {
public:
    using Error::Error;
};

/// Training stopped because the loss became non-finite.
class TrainingAborted : public Error {
public:
    using Error::Error;
};

}  // namespace rmfat
