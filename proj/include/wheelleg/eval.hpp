#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wheelleg/env.hpp"
#include "wheelleg/ppo.hpp"

namespace wheelleg {

enum class CommandProfile { kConstant, kTrapezoid, kStopAndGo };

std::string to_string(CommandProfile p);
CommandProfile command_profile_from_string(const std::string& s);

/// Forward velocity command at time t of an episode lasting `duration`.
/// trapezoid: ramp over the first quarter, hold, ramp down over the last quarter.
/// stop-and-go: 2 s at `speed`, 2 s stopped, repeating.
double profile_command(CommandProfile p, double speed, double t, double duration);

struct EvalOptions {
  std::string terrain = "flat";
  CommandProfile profile = CommandProfile::kConstant;
  double speed = 1.0;
  int episodes = 20;
  bool deterministic = true;
  bool randomize = false;
  std::uint64_t seed = 0;
};

struct EpisodeReport {
  double tracking_error = 0.0;  // mean |v_cmd - v_x|, m/s
  double distance = 0.0;        // m
  bool fell = false;
  double cost_of_transport = 0.0;
  double wheel_duty = 0.0;
  int steps = 0;
  double ret = 0.0;
  RewardVector reward_terms{};  // weighted, mean per step
};

struct EvalReport {
  EvalOptions options;
  std::vector<EpisodeReport> episodes;

  [[nodiscard]] double mean_tracking_error() const;
  [[nodiscard]] double fall_rate() const;
  [[nodiscard]] double mean_cost_of_transport() const;
  [[nodiscard]] double mean_wheel_duty() const;
  [[nodiscard]] double mean_distance() const;

  [[nodiscard]] nlohmann::json to_json() const;
  /// One row per episode, header first.
  void write_csv(std::ostream& out) const;
  bool operator==(const EvalReport& o) const;
};

/// Runs one episode per env, all envs stepped together. The learner is
/// copied, so stochastic evaluation leaves its RNG untouched.
EvalReport evaluate(const PpoLearner& learner, const Morphology& morphology, EnvParams params,
                    const EvalOptions& opts, Execution exec = Execution::kParallel);

}  // namespace wheelleg
