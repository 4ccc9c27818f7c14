#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "wheelleg/env.hpp"
#include "wheelleg/nn.hpp"
#include "wheelleg/ppo.hpp"
#include "wheelleg/robot_model.hpp"

namespace wheelleg {

/// Everything a training run needs. Every field has a default; the JSON form
/// mirrors the struct tree (see configs/ for examples).
struct RunConfig {
  std::string morphology_name = "planar-ref";
  /// Set when the config carries an inline morphology instead of a name.
  nlohmann::json morphology_inline;
  std::uint64_t seed = 1;
  int num_envs = 256;
  int horizon = 100;
  int iterations = 1000;
  int checkpoint_interval = 100;
  std::string output_dir = "runs/default";
  EnvParams env;
  NetworkDims network;  // obs/privileged/action widths are derived, not read
  PpoConfig ppo;

  [[nodiscard]] Morphology morphology() const;
  /// Network dims with the widths filled in from the morphology.
  [[nodiscard]] NetworkDims network_dims() const;
};

nlohmann::json to_json(const RunConfig& c);

/// Parses a config tree. Keys absent from the default tree are rejected
/// with a ConfigError naming the dotted key path, as are wrong types and
/// out-of-range values.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::string& path);

}  // namespace wheelleg
