#pragma once

#include <stdexcept>
#include <string>

namespace metaseg {

// Base for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/operation shape mismatch; message names the offending dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Mask value outside [0, K); message names the sample/pixels involved.
class LabelRangeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (bad fractions, unknown source in a distribution,
// support_size >= episode_size, ...). Maps to CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Sample routed to a task with no matching head.
class RoutingError : public Error {
 public:
  using Error::Error;
};

// Unknown parameter name in a gradient query.
class LookupError : public Error {
 public:
  using Error::Error;
};

// API contract violation (e.g. backward from a non-scalar root).
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Dataset ingestion failure (missing file, bad manifest, bad PNG).
class IngestError : public Error {
 public:
  using Error::Error;
};

// Filesystem write/read failure outside ingestion.
class IoError : public Error {
 public:
  using Error::Error;
};

// mIoU requested from an accumulator where every class union is zero.
class EmptyEvalError : public Error {
 public:
  using Error::Error;
};

}  // namespace metaseg
