#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "wheelleg/robot_model.hpp"
#include "wheelleg/terrain.hpp"
#include "wheelleg/types.hpp"

namespace wheelleg {

inline constexpr int kMaxJoints = 16;
inline constexpr int kMaxDofs = 3 + kMaxJoints;

using DofVector = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDofs, 1>;
using DofMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDofs, kMaxDofs>;

/// Per-environment physical perturbations. Identity values reproduce the
/// nominal morphology.
struct EnvOverrides {
  double mass_scale = 1.0;
  double payload = 0.0;    // kg added to the base
  double com_shift = 0.0;  // m along the base x axis
  double friction = 0.8;
  double motor_strength = 1.0;
  double gain_scale = 1.0;  // scales kp and kd (and the wheel servo gain)
  int action_delay = 0;     // control steps, consumed by the environment layer
};

struct SimParams {
  double dt = 0.005;
  int substeps = 4;
  double gravity = 9.81;
  double contact_stiffness = 2.0e4;
  double contact_damping = 200.0;
  double friction = 0.8;
  double stiction_velocity = 0.05;
  /// Wheel joints held fixed (infinite brake); their commands are ignored.
  bool lock_wheels = false;
  /// Per-env overrides; empty means every env uses defaults with `friction`.
  std::vector<EnvOverrides> overrides;

  [[nodiscard]] double control_dt() const { return dt * substeps; }
  [[nodiscard]] EnvOverrides env(int e) const;
};

enum class ContactKind : std::uint8_t { kWheel, kKnee, kBase };

struct ContactSite {
  ContactKind kind;
  int body;       // 0 = base, 1 + i = link i
  Vec2 local;     // point in the body frame (wheel: centre)
};

struct ContactRecord {
  Vec2 point{0.0, 0.0};
  double normal_force = 0.0;
  double tangential_force = 0.0;
  double slip_speed = 0.0;
  double penetration = 0.0;
  bool in_contact = false;
};

/// Batched generalized state. Coordinates: base x, base z, base pitch, then
/// joint angles (legs first, then wheels). Pitch is counter-clockwise in the
/// x-z plane, so positive pitch lifts the nose.
struct SimState {
  int num_envs = 0;
  int num_dofs = 0;
  int num_joints = 0;
  int num_sites = 0;
  std::vector<double> q;
  std::vector<double> v;
  std::vector<double> time;
  std::vector<double> torques;        // applied joint torques, num_envs x num_joints
  std::vector<double> positive_work;  // per joint over the last control period (J)
  std::vector<ContactRecord> contacts;
  std::vector<std::uint8_t> faulted;

  std::span<double> q_env(int e) { return {q.data() + e * num_dofs, static_cast<std::size_t>(num_dofs)}; }
  std::span<const double> q_env(int e) const {
    return {q.data() + e * num_dofs, static_cast<std::size_t>(num_dofs)};
  }
  std::span<double> v_env(int e) { return {v.data() + e * num_dofs, static_cast<std::size_t>(num_dofs)}; }
  std::span<const double> v_env(int e) const {
    return {v.data() + e * num_dofs, static_cast<std::size_t>(num_dofs)};
  }
  std::span<double> torques_env(int e) {
    return {torques.data() + e * num_joints, static_cast<std::size_t>(num_joints)};
  }
  std::span<const double> torques_env(int e) const {
    return {torques.data() + e * num_joints, static_cast<std::size_t>(num_joints)};
  }
  std::span<const double> work_env(int e) const {
    return {positive_work.data() + e * num_joints, static_cast<std::size_t>(num_joints)};
  }
  std::span<ContactRecord> contacts_env(int e) {
    return {contacts.data() + e * num_sites, static_cast<std::size_t>(num_sites)};
  }
  std::span<const ContactRecord> contacts_env(int e) const {
    return {contacts.data() + e * num_sites, static_cast<std::size_t>(num_sites)};
  }
  bool operator==(const SimState& o) const;
};

/// Batched actuator targets: num_envs x n_leg_joints and num_envs x n_wheels.
struct ActuatorCommand {
  std::vector<double> leg_targets;
  std::vector<double> wheel_targets;
};

/// Wall-clock split of the substep phases, filled when profiling is enabled.
struct StepProfile {
  double assembly_s = 0.0;
  double contact_s = 0.0;
  double solve_s = 0.0;
  std::int64_t substeps = 0;
};

struct BodyVelocity {
  std::array<double, 3> linear{};
  std::array<double, 3> angular{};
};

enum class Execution { kSerial, kParallel };

class Simulator {
 public:
  explicit Simulator(Morphology morphology);

  [[nodiscard]] const Morphology& morphology() const { return morphology_; }
  [[nodiscard]] const std::vector<ContactSite>& contact_sites() const { return sites_; }
  [[nodiscard]] SimState make_state(int num_envs) const;

  /// Advances every env by one control period (substeps x dt). `terrains`
  /// holds one heightfield per env. The serial path is the reference the
  /// OpenMP path is tested against.
  void step(SimState& state, const ActuatorCommand& cmd, const SimParams& params,
            std::span<const Heightfield* const> terrains, Execution exec = Execution::kParallel,
            StepProfile* profile = nullptr) const;

  /// One control period for a single env.
  void step_env(SimState& state, int env, const ActuatorCommand& cmd, const SimParams& params,
                const Heightfield& terrain, StepProfile* profile = nullptr) const;

  /// Joint-space mass matrix for the given configuration.
  [[nodiscard]] DofMatrix mass_matrix(std::span<const double> q, const EnvOverrides& ov = {}) const;
  /// Coriolis, centrifugal and gravity generalized forces.
  [[nodiscard]] DofVector bias_forces(std::span<const double> q, std::span<const double> v, double gravity,
                                      const EnvOverrides& ov = {}) const;
  /// Inverse dynamics: M(q) qdd + bias(q, v).
  [[nodiscard]] DofVector inverse_dynamics(std::span<const double> q, std::span<const double> v,
                                           std::span<const double> qdd, double gravity,
                                           const EnvOverrides& ov = {}) const;

  /// Kinetic + gravitational energy (contact springs excluded).
  [[nodiscard]] double mechanical_energy(std::span<const double> q, std::span<const double> v, double gravity,
                                         const EnvOverrides& ov = {}) const;
  /// Elastic energy stored in the penetrating contact springs at `q`.
  [[nodiscard]] double contact_spring_energy(std::span<const double> q, const SimParams& params,
                                             const Heightfield& terrain, const EnvOverrides& ov = {}) const;

  [[nodiscard]] double total_mass(const EnvOverrides& ov = {}) const;

  /// World position of a contact site (wheel sites: the wheel centre).
  [[nodiscard]] Vec2 site_position(std::span<const double> q, int site, const EnvOverrides& ov = {}) const;
  /// World position of body b's centre of mass.
  [[nodiscard]] Vec2 body_com(std::span<const double> q, int body, const EnvOverrides& ov = {}) const;

  /// Places env `e` at (x, pitch) with joints at `joint_q` and the lowest
  /// contact touching the terrain, then lowered by `sink` (the static contact
  /// compression). Velocities are zeroed.
  void place_on_terrain(SimState& s, int e, double x, std::span<const double> joint_q,
                        const Heightfield& terrain, double pitch = 0.0, double sink = 0.0) const;

 private:
  struct Workspace;
  void kinematics(std::span<const double> q, std::span<const double> v, const EnvOverrides& ov,
                  Workspace& ws) const;
  void assemble_mass(Workspace& ws) const;
  void assemble_bias(Workspace& ws, double gravity, std::span<const double> qdd) const;
  void substep(SimState& state, int env, std::span<const double> leg_targets, std::span<const double> wheel_targets,
               const SimParams& params, const EnvOverrides& ov, const Heightfield& terrain, Workspace& ws,
               StepProfile* profile) const;

  Morphology morphology_;
  std::vector<ContactSite> sites_;
  // support_[b] lists the joint indices on the path from body b to the base.
  std::vector<std::vector<int>> support_;
};

/// Base linear velocity in the base frame (planar slots x and z) and the
/// pitch rate in the y slot of the angular velocity.
BodyVelocity body_velocity(const SimState& s, int env);

/// World gravity direction in the base frame; the out-of-plane entry is 0.
std::array<double, 3> projected_gravity(const SimState& s, int env);

/// Sum over joints of max(tau * qdot, 0).
double mechanical_power(const SimState& s, int env);

/// Simulates the nominal robot holding its reference pose on `terrain` for
/// `duration` seconds and returns the settled single-env state.
SimState settle_stand_pose(const Simulator& sim, const SimParams& params, const Heightfield& terrain,
                           double duration = 4.0, double x = 1.0);

/// One JSON-lines record with q, v, torques and contacts of env `e`.
void write_trajectory_record(std::ostream& out, const SimState& s, int e);

}  // namespace wheelleg
