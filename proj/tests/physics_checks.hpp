#pragma once

// Physics sanity measurements shared by sim_test and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <vector>

#include "wheelleg/rng.hpp"
#include "wheelleg/sim.hpp"
#include "wheelleg/terrain.hpp"

namespace wheelleg::physics {

/// A base with one driven wheel and no legs.
inline Morphology single_wheel(double base_mass, double wheel_mass) {
  Morphology m;
  m.name = "single-wheel";
  m.base_mass = base_mass;
  m.base_inertia = 0.01;
  m.wheel_radius = 0.1;
  m.n_leg_joints = 0;
  m.n_wheels = 1;
  JointSpec j;
  j.name = "wheel";
  j.kind = JointKind::kWheel;
  j.parent_link = -1;
  j.velocity_limit = 30.0;
  j.torque_limit = 10.0;
  j.kd = 0.5;
  m.joints = {j};
  m.links = {LinkSpec{"wheel", wheel_mass, 0.5 * wheel_mass * 0.01, 0.0, 0.0}};
  return m;
}

inline ActuatorCommand hold_reference(const Morphology& m, double wheel_rate = 0.0) {
  const auto ref = m.reference_pose();
  return {std::vector<double>(ref.begin(), ref.begin() + m.n_leg_joints),
          std::vector<double>(static_cast<std::size_t>(m.n_wheels), wheel_rate)};
}

/// Largest base displacement (m) over `seconds` of holding the stand pose
/// episodes reset to (8 s settle, as in VecEnv).
inline double stand_drift(double seconds = 2.0) {
  const Simulator sim(planar_reference());
  const SimParams p;
  const Heightfield f = flat(10.0);
  SimState s = settle_stand_pose(sim, p, f, 8.0, 1.0);
  const double x0 = s.q[0], z0 = s.q[1];
  const ActuatorCommand cmd = hold_reference(sim.morphology());
  const Heightfield* ts[] = {&f};
  double worst = 0.0;
  const auto steps = static_cast<int>(std::llround(seconds / p.control_dt()));
  for (int i = 0; i < steps; ++i) {
    sim.step(s, cmd, p, ts, Execution::kSerial);
    worst = std::max(worst, std::hypot(s.q[0] - x0, s.q[1] - z0));
  }
  return worst;
}

struct Penetration {
  double measured = 0.0;
  double expected = 0.0;  // m g / k_n
  double normal_force = 0.0;
  double weight = 0.0;
};

/// Single wheel resting on flat ground after 4 s.
inline Penetration rest_penetration() {
  const Simulator sim(single_wheel(2.0, 1.0));
  const SimParams p;
  const Heightfield f = flat(4.0);
  SimState s = sim.make_state(1);
  sim.place_on_terrain(s, 0, 1.0, std::vector<double>{0.0}, f);
  const ActuatorCommand cmd{{}, {0.0}};
  const Heightfield* ts[] = {&f};
  for (int i = 0; i < 200; ++i) sim.step(s, cmd, p, ts, Execution::kSerial);
  const double weight = 3.0 * p.gravity;
  return {s.contacts[0].penetration, weight / p.contact_stiffness, s.contacts[0].normal_force, weight};
}

struct Rolling {
  double ground_speed = 0.0;
  double ideal = 0.0;  // omega * r
};

/// Planar robot driven at a constant wheel rate; mean speed over the last 2 s of 5.
inline Rolling rolling_consistency(double omega = 8.0) {
  const Simulator sim(planar_reference());
  SimParams p;
  p.friction = 1.0;
  const Heightfield f = flat(12.0);
  SimState s = settle_stand_pose(sim, p, f, 4.0, 1.0);
  const Heightfield* ts[] = {&f};
  double vx = 0.0;
  for (int i = 0; i < 250; ++i) {
    const double wi = omega * std::min(1.0, i / 50.0);
    sim.step(s, hold_reference(sim.morphology(), wi), p, ts, Execution::kSerial);
    if (i >= 150) vx += s.v[0] / 100.0;
  }
  return {vx, omega * sim.morphology().wheel_radius};
}

struct ConeCheck {
  long long env_steps = 0;
  long long contact_samples = 0;
  long long violations = 0;  // |f_t| > mu f_n or f_n < 0
  double worst_ratio = 0.0;  // max |f_t| / (mu f_n) over loaded contacts
};

/// Random joint and wheel targets on mixed terrain; every contact of every
/// control step is checked.
inline ConeCheck friction_cone(long long env_steps, int num_envs = 64, std::uint64_t seed = 17) {
  const Simulator sim(planar_reference());
  const Morphology& m = sim.morphology();
  const SimParams p;
  const TerrainSet set = generate_set(seed, 4, 4);
  Rng rng(seed);
  SimState s = sim.make_state(num_envs);
  std::vector<const Heightfield*> ts;
  for (int e = 0; e < num_envs; ++e) {
    ts.push_back(&set.terrains[static_cast<std::size_t>(e) % set.terrains.size()]);
    sim.place_on_terrain(s, e, 2.0, m.reference_pose(), *ts.back());
  }
  ActuatorCommand cmd;
  cmd.leg_targets.resize(static_cast<std::size_t>(m.n_leg_joints * num_envs));
  cmd.wheel_targets.resize(static_cast<std::size_t>(m.n_wheels * num_envs));
  ConeCheck r;
  while (r.env_steps < env_steps) {
    for (auto& x : cmd.leg_targets) x = rng.uniform(-1.5, 1.5);
    for (auto& x : cmd.wheel_targets) x = rng.uniform(-20.0, 20.0);
    sim.step(s, cmd, p, ts);
    r.env_steps += num_envs;
    for (const auto& c : s.contacts) {
      ++r.contact_samples;
      const double bound = p.friction * c.normal_force;
      if (c.normal_force < 0.0 || std::abs(c.tangential_force) > bound * (1.0 + 1e-9) + 1e-12) ++r.violations;
      if (bound > 0.0) r.worst_ratio = std::max(r.worst_ratio, std::abs(c.tangential_force) / bound);
    }
  }
  return r;
}

}  // namespace wheelleg::physics
