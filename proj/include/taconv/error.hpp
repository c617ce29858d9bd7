#pragma once

#include <stdexcept>
#include <string>

namespace taconv {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument/shape contract violated by the caller.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf, divergence, or an unsolvable numerical subproblem.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input files and datasets.
class DataError : public Error {
 public:
  using Error::Error;
};

// Severity search could not meet its contract (non-monotone, unreachable).
class CalibrationError : public Error {
 public:
  using Error::Error;
};

}  // namespace taconv
