#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "wheelleg/config.hpp"
#include "wheelleg/sim.hpp"

namespace wheelleg {

struct ThroughputRow {
  int envs = 0;
  std::int64_t steps = 0;      // control steps per env
  std::int64_t env_steps = 0;  // steps * envs
  double wall_s = 0.0;
  [[nodiscard]] double env_steps_per_s() const { return wall_s > 0.0 ? static_cast<double>(env_steps) / wall_s : 0.0; }
  [[nodiscard]] double us_per_env_step() const {
    return env_steps > 0 ? 1e6 * wall_s / static_cast<double>(env_steps) : 0.0;
  }
};

struct ThroughputReport {
  double simulated_seconds = 0.0;
  int threads = 1;
  std::vector<ThroughputRow> rows;
  /// Serial profiled pass over the largest batch.
  StepProfile profile;

  [[nodiscard]] nlohmann::json to_json() const;
};

/// Steps batches of 1 and cfg.num_envs envs for `simulated_seconds` of sim
/// time each, driving the actuators with uniform random actions drawn from
/// cfg.seed. Step counts depend only on the config, never on wall time.
ThroughputReport measure_throughput(const RunConfig& cfg, double simulated_seconds,
                                    Execution exec = Execution::kParallel);

}  // namespace wheelleg
