#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "wheelleg/config.hpp"
#include "wheelleg/env.hpp"
#include "wheelleg/ppo.hpp"

namespace wheelleg {

/// One metrics line.
struct IterationRecord {
  std::int64_t iteration = 0;
  double wall_time = 0.0;  // seconds since the trainer was built
  double env_steps_per_s = 0.0;
  std::int64_t env_steps = 0;
  int episodes = 0;  // finished during this collect
  double mean_return = 0.0;
  double mean_episode_length = 0.0;
  double mean_tracking_error = 0.0;
  double fall_rate = 0.0;
  double mean_level = 0.0;
  std::vector<int> level_histogram;  // envs per terrain level
  RewardVector reward_terms{};  // weighted, mean per env-step
  int faults = 0;
  UpdateStats update;

  [[nodiscard]] nlohmann::json to_json() const;
};

/// Keys whose values depend on the machine rather than on (config, seed).
inline constexpr const char* kTimingKeys[] = {"wall_time", "env_steps_per_s"};

/// Raised when an update produced nothing usable; the learner still holds
/// the last finite parameters.
class TrainingCollapse : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Trainer {
 public:
  explicit Trainer(RunConfig cfg);

  [[nodiscard]] const RunConfig& config() const { return cfg_; }
  [[nodiscard]] VecEnv& env() { return env_; }
  [[nodiscard]] PpoLearner& learner() { return learner_; }
  [[nodiscard]] const PpoLearner& learner() const { return learner_; }
  [[nodiscard]] std::int64_t iteration() const { return iteration_; }

  /// Collect T steps from every env, then run one PPO update.
  IterationRecord iterate();

  [[nodiscard]] Checkpoint checkpoint() const;
  /// Resumes learner state and the iteration counter. Env state restarts.
  void restore(const Checkpoint& ck);

 private:
  void collect(IterationRecord& rec);

  RunConfig cfg_;
  VecEnv env_;
  PpoLearner learner_;
  RolloutBuffer buffer_;
  std::int64_t iteration_ = 0;
  double start_time_ = 0.0;
};

/// Observation scales stored alongside checkpoints.
std::vector<std::pair<std::string, double>> observation_normalization();

}  // namespace wheelleg
