#pragma once

#include <stdexcept>
#include <string>

namespace rangediff {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents do not agree with what an operation requires.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid static configuration: even kernel extents, odd row counts, empty prompt pools, ...
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A runtime argument is outside its documented range (timestep, domain index, ...).
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Input that has no well-defined image under an operation (e.g. a zero-norm point).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

class MetricError : public Error {
public:
    using Error::Error;
};

/// Raised by the optimizer and the training loop (NaN gradients, non-finite losses).
class TrainingError : public Error {
public:
    using Error::Error;
};

/// File-format and filesystem failures. The message always names the offending path.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace rangediff
