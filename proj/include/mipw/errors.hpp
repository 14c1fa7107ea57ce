#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mipw {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid world parameters, presets, or experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A conditioning cell of the exact table has zero mass.
class DegenerateCellError : public Error {
 public:
  using Error::Error;
};

// A propensity score (or proxy score) reached 0 or 1.
class PositivityError : public Error {
 public:
  using Error::Error;
};

class SeparationError : public Error {
 public:
  using Error::Error;
};

class RankError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

// A model could not be fit because a required cell of the data is empty.
class FitError : public Error {
 public:
  using Error::Error;
};

class SizeError : public Error {
 public:
  using Error::Error;
};

class GroupEmptyError : public Error {
 public:
  using Error::Error;
};

// No complete case is available to draw an imputed propensity score from.
class ImputationSupportError : public Error {
 public:
  using Error::Error;
};

class SamplerExhaustedError : public Error {
 public:
  SamplerExhaustedError(std::size_t row, const std::string& what)
      : Error(what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

// Wraps an error raised while analysing one completed dataset of a stack.
class ImputationError : public Error {
 public:
  ImputationError(std::size_t imputation, const std::string& what)
      : Error("imputation " + std::to_string(imputation) + ": " + what),
        imputation_(imputation) {}
  std::size_t imputation() const noexcept { return imputation_; }

 private:
  std::size_t imputation_;
};

}  // namespace mipw
