#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace wheelleg {

/// Planar vector in the sagittal (x forward, z up) plane.
using Vec2 = Eigen::Vector2d;

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(what), key_(std::move(key)) {}
  [[nodiscard]] const std::string& key() const { return key_; }

 private:
  std::string key_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MorphologyMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace wheelleg
