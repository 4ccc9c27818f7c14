#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "wheelleg/rng.hpp"
#include "wheelleg/robot_model.hpp"
#include "wheelleg/sim.hpp"
#include "wheelleg/terrain.hpp"

namespace wheelleg {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Range&) const = default;
};

enum RewardTerm : int {
  kLinVel,
  kAngVel,
  kZVel,
  kOrientation,
  kTorque,
  kPower,
  kActionRate,
  kJointAccel,
  kWheelSlip,
  kWheelAirspin,
  kCollision,
  kTermination,
  kNumRewardTerms
};

inline constexpr std::array<std::string_view, kNumRewardTerms> kRewardTermNames = {
    "lin_vel", "ang_vel",    "z_vel",     "orientation",   "torque",    "power",
    "action_rate", "joint_accel", "wheel_slip", "wheel_airspin", "collision", "termination"};

/// Unweighted per-term values; tracking terms are in (0, 1], penalties <= 0.
using RewardVector = std::array<double, kNumRewardTerms>;

struct RewardWeights {
  RewardVector alpha{1.0, 0.5, 2.0, 5.0, 2e-4, 2e-3, 0.01, 2.5e-7, 0.1, 0.01, 1.0, 200.0};
};

struct ObservationNoise {
  double q = 0.01;
  double qd = 0.1;
  double angular = 0.05;
  double gravity = 0.05;
};

struct RandomizationParams {
  bool enabled = true;
  Range mass_scale{0.85, 1.15};
  Range payload{0.0, 3.0};
  Range com_shift{-0.03, 0.03};
  Range friction{0.4, 1.2};
  Range motor_strength{0.9, 1.1};
  Range gain_scale{0.9, 1.1};
  int max_delay = 2;
  double joint_perturbation = 0.1;
  double push_interval_s = 8.0;
  double push_velocity = 0.5;
};

struct CurriculumParams {
  int levels = 10;
  int variations = 20;
  double promote_tracking = 0.8;
  double promote_distance = 0.5;  // fraction of terrain length
  double demote_distance = 0.25;
  Range command_initial{-0.5, 0.5};
  Range command_max{-2.0, 2.0};
};

struct EnvParams {
  SimParams sim;
  TerrainParams terrain;
  RewardWeights reward;
  ObservationNoise noise;
  RandomizationParams randomization;
  CurriculumParams curriculum;
  double episode_length_s = 20.0;
  double fall_height = 0.15;
  double fall_pitch = 1.0;
  double action_clip = 100.0;
  double spawn_x = 1.0;
  int history_length = 20;
  /// When set, every episode uses this forward velocity command.
  std::optional<double> fixed_command;
  /// Training mode adds observation noise.
  bool training = true;

  [[nodiscard]] int episode_steps() const;
};

inline constexpr double kAngularScale = 0.25;
inline constexpr double kJointVelocityScale = 0.05;
inline constexpr double kForceScale = 0.01;
inline constexpr int kHeightSamples = 11;
inline constexpr double kHeightSpacing = 0.1;

/// Offsets of the observation blocks [c, w, g, q, qd, a_prev].
struct ObservationLayout {
  int command = 0;
  int angular = 3;
  int gravity = 6;
  int q = 9;
  int qd = 0;
  int action = 0;
  int size = 0;
};
ObservationLayout observation_layout(const Morphology& m);

int privileged_dim(const Morphology& m, int num_sites);

/// Writes one observation for env `e` into `out`. `noise` may be null (eval).
void assemble_observation(const SimState& s, int e, const Morphology& m, std::span<const double> command,
                          std::span<const double> prev_action, std::span<double> out,
                          const ObservationNoise* noise = nullptr, Rng* rng = nullptr);

/// Policy action to actuator targets for one env. Writes n_leg_joints leg
/// targets and n_wheels wheel targets.
void apply_action(std::span<const double> action, const Morphology& m, double clip, std::span<double> leg_targets,
                  std::span<double> wheel_targets);

struct RewardInput {
  std::span<const double> command;  // 3
  std::span<const double> action;
  std::span<const double> prev_action;
  std::span<const double> v_before;  // generalized velocities at the start of the step
  double control_dt = 0.02;
  bool fell = false;
};

/// Unweighted terms for env `e` of `next` (the post-step state).
RewardVector reward_terms(const SimState& next, int e, const Simulator& sim, const RewardInput& in);
double weighted_total(const RewardVector& terms, const RewardWeights& w);

struct Randomization {
  EnvOverrides overrides;
  std::vector<double> joint_offsets;  // leg joints only
};

/// Per-episode physical draw; a pure function of (env index, seed).
Randomization randomize(int env_index, std::uint64_t seed, const RandomizationParams& p, const Morphology& m,
                        double base_friction);

struct CurriculumState {
  std::vector<int> level;
  Range command_range;
  std::int64_t promotions = 0;
  std::int64_t demotions = 0;

  [[nodiscard]] double mean_level() const;
};

struct EpisodeOutcome {
  double mean_tracking = 0.0;  // mean unweighted lin-vel term
  double forward_distance = 0.0;
  bool fell = false;
};

/// Applies the promotion/demotion rule to env `e`; returns the level change.
int update_curriculum(CurriculumState& c, int e, const EpisodeOutcome& o, const CurriculumParams& p,
                      double terrain_length);
/// Widens the command range once the population mean level crosses levels/2.
void update_command_range(CurriculumState& c, const CurriculumParams& p);

struct EpisodeStats {
  int env = 0;
  int steps = 0;
  double ret = 0.0;
  RewardVector term_sums{};
  double tracking_error_sum = 0.0;  // sum of |v_cmd - v_x|
  double tracking_sum = 0.0;        // sum of the unweighted lin-vel term
  double start_x = 0.0;
  double distance = 0.0;  // final x - start x
  double energy = 0.0;    // positive mechanical work, J
  double wheel_energy = 0.0;
  double total_mass = 0.0;
  int level = 0;
  bool fell = false;
  bool timeout = false;
  bool faulted = false;

  [[nodiscard]] double mean_tracking_error() const { return steps > 0 ? tracking_error_sum / steps : 0.0; }
  [[nodiscard]] double cost_of_transport(double gravity) const;
  [[nodiscard]] double wheel_duty() const { return energy > 0.0 ? wheel_energy / energy : 0.0; }
};

struct StepResult {
  std::vector<double> reward;
  std::vector<std::uint8_t> done;
  std::vector<std::uint8_t> timeout;
  /// Observation and privileged state reached by done envs before their reset.
  std::vector<double> terminal_obs;
  std::vector<double> terminal_privileged;
  RewardVector term_means{};  // weighted, averaged over envs
  std::vector<EpisodeStats> finished;
  int faults = 0;
};

/// Batched POMDP environment over the planar simulator.
class VecEnv {
 public:
  VecEnv(Morphology morphology, EnvParams params, int num_envs, std::uint64_t seed);

  [[nodiscard]] int num_envs() const { return num_envs_; }
  [[nodiscard]] int obs_dim() const { return layout_.size; }
  [[nodiscard]] int act_dim() const { return action_dim(sim_.morphology()); }
  [[nodiscard]] int privileged_dim() const { return priv_dim_; }
  [[nodiscard]] int history_length() const { return params_.history_length; }
  [[nodiscard]] const ObservationLayout& layout() const { return layout_; }
  [[nodiscard]] const EnvParams& params() const { return params_; }
  [[nodiscard]] const Simulator& simulator() const { return sim_; }
  [[nodiscard]] const SimState& state() const { return state_; }
  [[nodiscard]] SimState& mutable_state() { return state_; }
  [[nodiscard]] const CurriculumState& curriculum() const { return curriculum_; }
  [[nodiscard]] const TerrainSet& terrains() const { return terrains_; }

  /// Current observation, N x obs_dim.
  [[nodiscard]] const std::vector<double>& observations() const { return obs_; }
  /// Oldest-first window of the last H observations, N x (H * obs_dim).
  [[nodiscard]] const std::vector<double>& histories() const { return history_; }
  [[nodiscard]] const std::vector<double>& privileged() const { return priv_; }
  /// True base-frame velocity for the current observation, N x 3.
  [[nodiscard]] const std::vector<double>& true_velocity() const { return true_vel_; }
  [[nodiscard]] std::span<const double> command(int e) const;

  void reset_all();
  void reset_env(int e);
  /// Every env uses `terrain` (null restores the curriculum) from its next reset.
  void set_terrain_override(const Heightfield* terrain);
  /// Forces the velocity command of env `e` for the rest of its episode.
  void set_command(int e, double vx);
  void set_trajectory_sink(std::ostream* out) { trajectory_ = out; }

  /// actions: N x act_dim.
  StepResult step(std::span<const double> actions, Execution exec = Execution::kParallel);

 private:
  void refresh_observation(int e, bool reset_history);
  void fill_privileged(int e);
  std::uint64_t episode_seed(int e) const;

  Simulator sim_;
  EnvParams params_;
  int num_envs_;
  std::uint64_t seed_;
  ObservationLayout layout_;
  int priv_dim_ = 0;
  TerrainSet terrains_;
  const Heightfield* terrain_override_ = nullptr;
  std::vector<double> stand_pose_;
  double stand_pitch_ = 0.0;
  double stand_sink_ = 0.0;

  SimState state_;
  std::vector<const Heightfield*> terrain_of_;
  std::vector<Rng> rng_;
  std::vector<Randomization> draw_;
  std::vector<std::int64_t> episode_count_;
  std::vector<int> episode_step_;
  std::vector<double> command_;       // N x 3
  std::vector<double> prev_action_;   // N x act
  std::vector<double> target_fifo_;   // N x (max_delay + 1) x act targets, newest first
  std::vector<double> obs_;
  std::vector<double> history_;
  std::vector<double> priv_;
  std::vector<double> true_vel_;
  std::vector<EpisodeStats> episode_;
  CurriculumState curriculum_;
  std::ostream* trajectory_ = nullptr;
};

}  // namespace wheelleg
