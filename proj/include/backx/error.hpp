#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace backx {

/// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// The model or method cannot provide what was asked (no biases, no
/// feature layer, too few classes).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(std::size_t epoch, const std::string& what)
      : Error("training diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

class IngestionError : public Error {
 public:
  IngestionError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// A trojaned model failed its verification gate.
class GateError : public Error {
 public:
  using Error::Error;
};

}  // namespace backx
