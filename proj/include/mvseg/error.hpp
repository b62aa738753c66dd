#pragma once

#include <stdexcept>
#include <string>

namespace mvseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// File content is not a valid volume/manifest/checkpoint.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-supplied configuration (bad k, empty split, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition (shape mismatch, bad record).
class ContractError : public Error {
 public:
  using Error::Error;
};

class PreprocessError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace mvseg
