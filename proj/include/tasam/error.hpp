#pragma once

#include <stdexcept>
#include <string>

namespace tasam {

// Shape or configuration problem detected at an API boundary.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf surfaced in parameters, gradients or losses.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed message between agents and the environment (e.g. action length).
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tasam
