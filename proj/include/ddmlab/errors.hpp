#pragma once

#include <stdexcept>
#include <string>

namespace ddmlab {

/// Base class for every error raised by the lab.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Vector/matrix dimensions disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation (e.g. t outside [0,1]).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values produced during integration.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Training loss became non-finite.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

/// Malformed checkpoint or data file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace ddmlab
