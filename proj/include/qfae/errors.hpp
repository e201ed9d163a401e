#pragma once

#include <stdexcept>
#include <string>

namespace qfae {

/// Bad argument, shape or configuration value.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

/// File could not be read, decoded or written.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// A tensor required by a backbone layout is missing or has the wrong shape.
class ManifestError : public std::runtime_error {
 public:
  ManifestError(std::string tensor, const std::string& what)
      : std::runtime_error(what), tensor_(std::move(tensor)) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

/// Non-finite loss or gradient during optimization.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(long step, const std::string& what) : std::runtime_error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace qfae
