#pragma once

#include <stdexcept>
#include <string>

namespace las {

// Every library failure derives from Error so callers (the CLI in particular)
// can map families of failures onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite or otherwise unusable numeric input.
class InputError : public Error {
 public:
  using Error::Error;
};

class EmptyInputError : public InputError {
 public:
  using InputError::InputError;
};

// Invalid neuron/config parameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class FitError : public Error {
 public:
  using Error::Error;
};

// Stateful spike operators driven out of protocol (e.g. mismatched step counts).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class UndefinedRatioError : public Error {
 public:
  using Error::Error;
};

// A NaN/Inf surfaced on the spike path.
class NumericError : public Error {
 public:
  NumericError(std::string layer, std::size_t step, const std::string& what)
      : Error(what), layer_(std::move(layer)), step_(step) {}
  const std::string& layer() const noexcept { return layer_; }
  std::size_t step() const noexcept { return step_; }

 private:
  std::string layer_;
  std::size_t step_;
};

}  // namespace las
