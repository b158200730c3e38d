#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace panelglmm {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inputs that violate a documented precondition (shapes, domains, layout).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// |rho| beyond the stationarity margin.
class StationarityError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

// Cholesky or conditioning failure; carries a minimum-eigenvalue estimate.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, double min_eigenvalue)
      : Error(what), min_eigenvalue_(min_eigenvalue) {}
  double min_eigenvalue() const noexcept { return min_eigenvalue_; }

 private:
  double min_eigenvalue_;
};

// Ridge normal equations that cannot be solved (typically lambda = 0 with collinear X).
class SingularSystemError : public Error {
 public:
  using Error::Error;
};

class LinearizationError : public Error {
 public:
  LinearizationError(const std::string& what, std::ptrdiff_t row)
      : Error(what), row_(row) {}
  std::ptrdiff_t row() const noexcept { return row_; }

 private:
  std::ptrdiff_t row_;
};

// tr(S) >= n: the hat matrix interpolates the working response.
class DegenerateFitError : public Error {
 public:
  using Error::Error;
};

class SelectionError : public Error {
 public:
  using Error::Error;
};

// Zero-variance component in the structural relevance criterion.
class RelevanceError : public Error {
 public:
  using Error::Error;
};

class MStepError : public Error {
 public:
  using Error::Error;
};

// CSV data that breaks the balanced-panel contract (CLI exit code 2).
class DataContractError : public Error {
 public:
  using Error::Error;
};

// Configuration documents that fail validation (CLI exit code 3).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace panelglmm
