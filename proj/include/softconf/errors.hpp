#pragma once

#include <stdexcept>
#include <string>

namespace softconf {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes of two operands disagree.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid argument or configuration value.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// File cannot be opened, read, or parsed.
class IoError : public Error {
public:
    using Error::Error;
};

/// Non-finite values, singular matrices, failed root brackets, divergence.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// A weight column has zero norm, so angles to it are undefined.
class DegenerateWeightError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// The point sits exactly on a decision boundary (argmax tie).
class OnBoundaryError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// A mixture covariance is not positive definite even after regularization.
class SingularModelError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

}  // namespace softconf
