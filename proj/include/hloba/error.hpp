#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hloba {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (dimension mismatch, bad index, malformed config file).
class ConfigurationError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// The time integrator produced a non-finite or runaway value.
class IntegrationBlowup : public Error {
 public:
  IntegrationBlowup(const std::string& what, std::size_t step) : Error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// A configured memory/storage cap would be exceeded.
class ResourceError : public Error {
 public:
  using Error::Error;
};

/// An optimizer could not make progress (line search exhausted, non-finite iterate).
class OptimizationStalled : public Error {
 public:
  using Error::Error;
};

/// Training data does not support the requested model (e.g. rank below n_z).
class DegenerateData : public Error {
 public:
  using Error::Error;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

/// Too few samples for a statistical estimator.
class InsufficientSample : public Error {
 public:
  using Error::Error;
};

/// The time-lagged archive is too short to assemble an ensemble yet.
class SpinUpRequired : public InsufficientSample {
 public:
  using InsufficientSample::InsufficientSample;
};

class EstimationError : public Error {
 public:
  using Error::Error;
};

/// A metric is not defined for the given inputs (zero variance, empty set).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

class ExperimentDiverged : public Error {
 public:
  using Error::Error;
};

}  // namespace hloba
