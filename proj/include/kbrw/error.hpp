#pragma once

#include <stdexcept>
#include <string>

namespace kbrw {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid model specification (bad probabilities, E[nu] <= 1, ...).
class ModelError : public Error {
 public:
  using Error::Error;
};

/// The requested operation needs a regime or tilt the model does not have.
class RegimeError : public Error {
 public:
  using Error::Error;
};

/// A simulation or enumeration exceeded its budget.
class CapError : public Error {
 public:
  using Error::Error;
};

}  // namespace kbrw
