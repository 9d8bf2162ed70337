#pragma once

#include <stdexcept>
#include <string>

namespace rfm {

class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Operand extents are incompatible with the operation.
class ShapeError : public Error {
   public:
    using Error::Error;
};

/// A NaN or Inf appeared where finite values are required.
class NumericError : public Error {
   public:
    using Error::Error;
};

/// Invalid hyperparameter or schedule.
class ConfigError : public Error {
   public:
    using Error::Error;
};

/// Caller violated an API precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
   public:
    using Error::Error;
};

/// Malformed external input (audio, manifest, embedding file).
class InputError : public Error {
   public:
    using Error::Error;
};

class CorruptionError : public Error {
   public:
    using Error::Error;
};

class VersionError : public Error {
   public:
    using Error::Error;
};

}  // namespace rfm
