#pragma once

#include <stdexcept>
#include <string>

namespace crossdistill {

// Dimension mismatch in linear algebra or model/data plumbing.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Bad function argument outside shape issues (empty dataset, fraction out of range, ...).
class ArgumentError : public std::invalid_argument {
 public:
  explicit ArgumentError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid or infeasible configuration (unknown key, infeasible ctr_gap, zero-size layer, ...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or inconsistent data reaching an operation (missing teacher label, domain leak, ...).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Schema mismatch between a dataset and a consumer.
class SchemaError : public std::runtime_error {
 public:
  explicit SchemaError(const std::string& msg) : std::runtime_error(msg) {}
};

// A metric whose preconditions do not hold (single-class AUC, zero-variance R^2).
// Reporting layers catch this and mark the metric absent.
class UndefinedMetricError : public std::runtime_error {
 public:
  explicit UndefinedMetricError(const std::string& msg) : std::runtime_error(msg) {}
};

// Writing to an augmented slot that is already filled, without overwrite.
class ConflictError : public std::runtime_error {
 public:
  explicit ConflictError(const std::string& msg) : std::runtime_error(msg) {}
};

// Cross-seed comparison fed with unpaired or incompatible runs.
class PairingError : public std::runtime_error {
 public:
  explicit PairingError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem failures surfaced by serialization.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// A pipeline stage failed; message names the stage and wraps the cause.
class PipelineError : public std::runtime_error {
 public:
  explicit PipelineError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace crossdistill
