#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace feri {

// Root of every error thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Operation invoked in the wrong lifecycle state (e.g. backward before forward).
class StateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class EmptyTaskError : public Error {
 public:
  explicit EmptyTaskError(std::size_t task)
      : Error("task " + std::to_string(task) + " has no samples"), task_(task) {}
  std::size_t task() const noexcept { return task_; }

 private:
  std::size_t task_;
};

class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t epoch, const std::string& what)
      : Error("diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

// A metric is not defined for the given input (single-class labels, empty group...).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace feri
