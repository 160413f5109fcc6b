#pragma once

#include <stdexcept>
#include <string>

namespace qgate {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or rank disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration: bad hyperparameters, unresolved sites, missing gate, etc.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or mismatched files and datasets.
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered during training or calibration.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace qgate
