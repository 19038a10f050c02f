#pragma once

#include <stdexcept>
#include <string>

namespace exo {

// Numerical failures. The CLI maps these to exit code 4.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateSample : NumericalError {
  using NumericalError::NumericalError;
};

struct NullEstimationFailure : NumericalError {
  using NumericalError::NumericalError;
};

struct SingularRegularization : NumericalError {
  using NumericalError::NumericalError;
};

struct DegenerateSignal : NumericalError {
  using NumericalError::NumericalError;
};

struct NonFiniteLoss : NumericalError {
  using NumericalError::NumericalError;
};

struct NoProgress : NumericalError {
  using NumericalError::NumericalError;
};

struct ProfileInvalid : NumericalError {
  using NumericalError::NumericalError;
};

struct StabilityInvalid : NumericalError {
  using NumericalError::NumericalError;
};

// Data / IO failures. Exit code 3.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MissingLabels : DataError {
  using DataError::DataError;
};

struct NodeMismatch : DataError {
  using DataError::DataError;
};

struct NonFiniteData : DataError {
  using DataError::DataError;
};

// Configuration / usage failures. Exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CyclicSpec : ConfigError {
  using ConfigError::ConfigError;
};

struct UnknownNode : ConfigError {
  using ConfigError::ConfigError;
};

struct DimensionMismatch : ConfigError {
  using ConfigError::ConfigError;
};

}  // namespace exo
