#pragma once

#include <stdexcept>
#include <string>

namespace spl {

/// Base error carrying a short machine-parsable category token.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

/// Malformed or invariant-violating file content (session files, checkpoints, PGM).
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& message) : Error("format", message) {}
};

/// World generation could not satisfy a placement constraint.
class PlacementError : public Error {
 public:
  explicit PlacementError(const std::string& message) : Error("placement", message) {}
};

/// Frames fed to a sequential consumer out of order.
class OrderingError : public Error {
 public:
  explicit OrderingError(const std::string& message) : Error("ordering", message) {}
};

/// Tensor/image dimensions do not match what a consumer expects.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& message) : Error("shape", message) {}
};

/// Class label outside the valid range.
class LabelError : public Error {
 public:
  explicit LabelError(const std::string& message) : Error("label", message) {}
};

/// Dataset unusable for the requested operation (empty, single-class, ...).
class DatasetError : public Error {
 public:
  explicit DatasetError(const std::string& message) : Error("dataset", message) {}
};

/// Batch too small for a loss that needs in-batch negatives.
class BatchError : public Error {
 public:
  explicit BatchError(const std::string& message) : Error("batch", message) {}
};

/// Referential inconsistency between artifacts (e.g. query id missing from database).
class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& message) : Error("integrity", message) {}
};

/// Bad configuration file or option value.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("config", message) {}
};

/// Filesystem-level failure, always naming the path involved.
class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

}  // namespace spl
