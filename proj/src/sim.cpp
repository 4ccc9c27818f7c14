#include "wheelleg/sim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <stdexcept>

#include <Eigen/Cholesky>
#include <nlohmann/json.hpp>

namespace wheelleg {
namespace {

// Planar spatial algebra in world coordinates, referred to the world origin.
// A motion vector is (omega, vx, vz); a force vector is (moment, fx, fz).
// Angles are counter-clockwise in the x-z plane.
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline Vec2 rotate(double angle, const Vec2& p) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return {c * p.x() - s * p.y(), s * p.x() + c * p.y()};
}

inline Vec2 perp(const Vec2& v) { return {-v.y(), v.x()}; }
inline double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

inline Vec3 motion_cross(const Vec3& m1, const Vec3& m2) {
  const Vec2 v1{m1[1], m1[2]};
  const Vec2 v2{m2[1], m2[2]};
  const Vec2 r = m1[0] * perp(v2) - m2[0] * perp(v1);
  return {0.0, r.x(), r.y()};
}

inline Vec3 force_cross(const Vec3& m, const Vec3& f) {
  const Vec2 v{m[1], m[2]};
  const Vec2 fl{f[1], f[2]};
  const Vec2 r = m[0] * perp(fl);
  return {cross2(v, fl), r.x(), r.y()};
}

inline Mat3 spatial_inertia(double mass, double inertia_com, const Vec2& c) {
  Mat3 I;
  I << inertia_com + mass * c.squaredNorm(), -mass * c.y(), mass * c.x(),
       -mass * c.y(), mass, 0.0,
       mass * c.x(), 0.0, mass;
  return I;
}

inline Vec3 revolute_axis(const Vec2& at) { return {1.0, at.y(), -at.x()}; }

// Linear velocity contribution at world point p of motion vector m.
inline Vec2 point_velocity(const Vec3& m, const Vec2& p) { return Vec2{m[1], m[2]} + m[0] * perp(p); }

constexpr int kMaxBodies = kMaxJoints + 1;
constexpr int kMaxSites = 3 * kMaxJoints + 8;

enum class FrictionMode : std::uint8_t { kNone, kStick, kSlip };

struct ContactEval {
  Vec2 point;
  Vec2 normal;
  Vec2 tangent;
  double penetration = 0.0;
  double normal_force = 0.0;
  double slip_sign = 0.0;
  bool active = false;
  FrictionMode mode = FrictionMode::kNone;
  DofVector jn;
  DofVector jt;
};

}  // namespace

struct Simulator::Workspace {
  int nb = 0;
  int nd = 0;
  std::array<double, kMaxBodies> angle{};
  std::array<Vec2, kMaxBodies> origin{};
  std::array<Vec2, kMaxBodies> com{};
  std::array<double, kMaxBodies> mass{};
  std::array<double, kMaxBodies> inertia{};
  std::array<Vec3, kMaxDofs> S{};
  std::array<Vec3, kMaxBodies> V{};
  std::array<Mat3, kMaxBodies> I{};
  std::array<Mat3, kMaxBodies> Ic{};
  std::array<Vec3, kMaxBodies> f{};
  DofVector v;
  DofMatrix M;
  DofVector bias;
  std::array<ContactEval, kMaxSites> contacts{};
};

EnvOverrides SimParams::env(int e) const {
  if (overrides.empty()) {
    EnvOverrides ov;
    ov.friction = friction;
    return ov;
  }
  return overrides.at(static_cast<std::size_t>(e));
}

bool SimState::operator==(const SimState& o) const {
  if (num_envs != o.num_envs || num_dofs != o.num_dofs || q != o.q || v != o.v || time != o.time ||
      torques != o.torques || positive_work != o.positive_work || faulted != o.faulted ||
      contacts.size() != o.contacts.size()) {
    return false;
  }
  for (std::size_t i = 0; i < contacts.size(); ++i) {
    const auto& a = contacts[i];
    const auto& b = o.contacts[i];
    if (a.point != b.point || a.normal_force != b.normal_force || a.tangential_force != b.tangential_force ||
        a.slip_speed != b.slip_speed || a.penetration != b.penetration || a.in_contact != b.in_contact) {
      return false;
    }
  }
  return true;
}

Simulator::Simulator(Morphology morphology) : morphology_(std::move(morphology)) {
  require_valid(morphology_);
  if (!morphology_.has_dynamics) {
    throw ValidationError("morphology '" + morphology_.name + "' is dimension-only and cannot be simulated");
  }
  if (morphology_.num_joints() > kMaxJoints) throw ValidationError("too many joints for the planar simulator");

  const int nj = morphology_.num_joints();
  support_.assign(static_cast<std::size_t>(nj + 1), {});
  for (int i = 0; i < nj; ++i) {
    auto& sup = support_[static_cast<std::size_t>(i + 1)];
    for (int j = i; j >= 0; j = morphology_.joints[static_cast<std::size_t>(j)].parent_link) sup.push_back(j);
  }

  for (int i = 0; i < nj; ++i) {
    if (morphology_.is_wheel(i)) sites_.push_back({ContactKind::kWheel, i + 1, Vec2::Zero()});
  }
  for (int i = 0; i < nj; ++i) {
    const auto& j = morphology_.joints[static_cast<std::size_t>(i)];
    if (!morphology_.is_wheel(i) && j.parent_link >= 0) sites_.push_back({ContactKind::kKnee, i + 1, Vec2::Zero()});
  }
  for (const auto& p : morphology_.base_contact_points) sites_.push_back({ContactKind::kBase, 0, p});
  if (static_cast<int>(sites_.size()) > kMaxSites) throw ValidationError("too many contact sites");
}

SimState Simulator::make_state(int num_envs) const {
  if (num_envs < 1) throw ArgumentError("need at least one environment");
  SimState s;
  s.num_envs = num_envs;
  s.num_dofs = morphology_.num_dofs();
  s.num_joints = morphology_.num_joints();
  s.num_sites = static_cast<int>(sites_.size());
  const auto n = static_cast<std::size_t>(num_envs);
  s.q.assign(n * static_cast<std::size_t>(s.num_dofs), 0.0);
  s.v.assign(n * static_cast<std::size_t>(s.num_dofs), 0.0);
  s.time.assign(n, 0.0);
  s.torques.assign(n * static_cast<std::size_t>(s.num_joints), 0.0);
  s.positive_work.assign(n * static_cast<std::size_t>(s.num_joints), 0.0);
  s.contacts.assign(n * static_cast<std::size_t>(s.num_sites), ContactRecord{});
  s.faulted.assign(n, 0);
  return s;
}

double Simulator::total_mass(const EnvOverrides& ov) const {
  return morphology_.total_mass() * ov.mass_scale + ov.payload;
}

void Simulator::kinematics(std::span<const double> q, std::span<const double> v, const EnvOverrides& ov,
                           Workspace& ws) const {
  const int nj = morphology_.num_joints();
  ws.nb = nj + 1;
  ws.nd = nj + 3;

  ws.angle[0] = q[2];
  ws.origin[0] = Vec2{q[0], q[1]};
  ws.com[0] = ws.origin[0] + rotate(q[2], Vec2{ov.com_shift, 0.0});
  ws.mass[0] = morphology_.base_mass * ov.mass_scale + ov.payload;
  ws.inertia[0] = morphology_.base_inertia * ov.mass_scale;
  ws.S[0] = Vec3{0.0, 1.0, 0.0};
  ws.S[1] = Vec3{0.0, 0.0, 1.0};
  ws.S[2] = revolute_axis(ws.origin[0]);
  if (!v.empty()) {
    ws.v = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    ws.V[0] = ws.S[0] * v[0] + ws.S[1] * v[1] + ws.S[2] * v[2];
  } else {
    ws.v.setZero(ws.nd);
  }

  for (int i = 0; i < nj; ++i) {
    const auto& joint = morphology_.joints[static_cast<std::size_t>(i)];
    const auto& link = morphology_.links[static_cast<std::size_t>(i)];
    const int b = i + 1;
    const int p = joint.parent_link + 1;
    ws.origin[b] = ws.origin[p] + rotate(ws.angle[p], joint.axis_offset);
    // Joints turn about +y (clockwise in this x-z view), unlike base pitch.
    ws.angle[b] = ws.angle[p] + joint.zero_angle - q[3 + i];
    ws.com[b] = ws.origin[b] + rotate(ws.angle[b], Vec2{link.com_offset, 0.0});
    ws.mass[b] = link.mass * ov.mass_scale;
    ws.inertia[b] = link.inertia * ov.mass_scale;
    ws.S[3 + i] = -revolute_axis(ws.origin[b]);
    if (!v.empty()) ws.V[b] = ws.V[p] + ws.S[3 + i] * v[3 + i];
  }
  for (int b = 0; b < ws.nb; ++b) ws.I[b] = spatial_inertia(ws.mass[b], ws.inertia[b], ws.com[b]);
}

// Composite-rigid-body assembly of the joint-space mass matrix.
void Simulator::assemble_mass(Workspace& ws) const {
  const int nj = morphology_.num_joints();
  for (int b = 0; b < ws.nb; ++b) ws.Ic[b] = ws.I[b];
  for (int i = nj - 1; i >= 0; --i) {
    ws.Ic[morphology_.joints[static_cast<std::size_t>(i)].parent_link + 1] += ws.Ic[i + 1];
  }
  ws.M.setZero(ws.nd, ws.nd);
  for (int a = 0; a < 3; ++a) {
    const Vec3 F = ws.Ic[0] * ws.S[a];
    for (int b = 0; b <= a; ++b) {
      ws.M(a, b) = ws.M(b, a) = ws.S[b].dot(F);
    }
  }
  for (int i = 0; i < nj; ++i) {
    const int d = 3 + i;
    const Vec3 F = ws.Ic[i + 1] * ws.S[d];
    for (int k : support_[static_cast<std::size_t>(i + 1)]) {
      ws.M(d, 3 + k) = ws.M(3 + k, d) = ws.S[3 + k].dot(F);
    }
    for (int a = 0; a < 3; ++a) ws.M(d, a) = ws.M(a, d) = ws.S[a].dot(F);
  }
}

// Recursive Newton-Euler with a fictitious upward base acceleration for
// gravity: returns M(q) qdd + C(q, v) v + g(q). Requires velocities in ws.
void Simulator::assemble_bias(Workspace& ws, double gravity, std::span<const double> qdd) const {
  const int nj = morphology_.num_joints();
  auto acc = [&](int d) { return qdd.empty() ? 0.0 : qdd[static_cast<std::size_t>(d)]; };

  std::array<Vec3, kMaxBodies> A;
  // The pitch axis translates with the base: d/dt S_pitch = (0, zdot, -xdot).
  const Vec3 pitch_axis_rate{0.0, ws.v[1], -ws.v[0]};
  A[0] = Vec3{0.0, 0.0, gravity} + ws.S[0] * acc(0) + ws.S[1] * acc(1) + ws.S[2] * acc(2) +
         pitch_axis_rate * ws.v[2];
  for (int i = 0; i < nj; ++i) {
    const int b = i + 1;
    const int p = morphology_.joints[static_cast<std::size_t>(i)].parent_link + 1;
    const int d = 3 + i;
    A[b] = A[p] + ws.S[d] * acc(d) + motion_cross(ws.V[b], ws.S[d]) * ws.v[d];
  }
  for (int b = 0; b < ws.nb; ++b) ws.f[b] = ws.I[b] * A[b] + force_cross(ws.V[b], ws.I[b] * ws.V[b]);
  for (int i = nj - 1; i >= 0; --i) {
    ws.f[morphology_.joints[static_cast<std::size_t>(i)].parent_link + 1] += ws.f[i + 1];
  }
  ws.bias.setZero(ws.nd);
  for (int a = 0; a < 3; ++a) ws.bias[a] = ws.S[a].dot(ws.f[0]);
  for (int i = 0; i < nj; ++i) ws.bias[3 + i] = ws.S[3 + i].dot(ws.f[i + 1]);
}

DofMatrix Simulator::mass_matrix(std::span<const double> q, const EnvOverrides& ov) const {
  Workspace ws;
  kinematics(q, {}, ov, ws);
  assemble_mass(ws);
  return ws.M;
}

DofVector Simulator::bias_forces(std::span<const double> q, std::span<const double> v, double gravity,
                                 const EnvOverrides& ov) const {
  Workspace ws;
  kinematics(q, v, ov, ws);
  assemble_bias(ws, gravity, {});
  return ws.bias;
}

DofVector Simulator::inverse_dynamics(std::span<const double> q, std::span<const double> v,
                                      std::span<const double> qdd, double gravity, const EnvOverrides& ov) const {
  Workspace ws;
  kinematics(q, v, ov, ws);
  assemble_bias(ws, gravity, qdd);
  return ws.bias;
}

double Simulator::mechanical_energy(std::span<const double> q, std::span<const double> v, double gravity,
                                    const EnvOverrides& ov) const {
  Workspace ws;
  kinematics(q, v, ov, ws);
  assemble_mass(ws);
  double e = 0.5 * ws.v.dot(ws.M * ws.v);
  for (int b = 0; b < ws.nb; ++b) e += ws.mass[b] * gravity * ws.com[b].y();
  return e;
}

Vec2 Simulator::body_com(std::span<const double> q, int body, const EnvOverrides& ov) const {
  Workspace ws;
  kinematics(q, {}, ov, ws);
  return ws.com[static_cast<std::size_t>(body)];
}

namespace {

// Contacts this close are linearized too, so a site that reaches the ground
// within one substep is already resisted in that substep.
constexpr double kSpeculativeMargin = 0.05;

struct SiteGeometry {
  Vec2 point;
  Vec2 normal;
  double penetration;
};

SiteGeometry wheel_geometry(const Vec2& centre, double radius, const Heightfield& terrain) {
  const double ground = height_at(terrain, centre.x());
  if (centre.y() < ground) {
    const Vec2 n = normal_at(terrain, centre.x());
    return {centre - radius * n, n, radius + (ground - centre.y()) * n.y()};
  }
  const SurfacePoint sp = closest_surface_point(terrain, centre, radius + kSpeculativeMargin);
  Vec2 n = centre - sp.point;
  const double dist = n.norm();
  if (dist > 1e-12) {
    n /= dist;
  } else {
    n = normal_at(terrain, centre.x());
  }
  return {centre - radius * n, n, radius - dist};
}

SiteGeometry point_geometry(const Vec2& p, const Heightfield& terrain) {
  const Vec2 n = normal_at(terrain, p.x());
  return {p, n, (height_at(terrain, p.x()) - p.y()) * n.y()};
}

}  // namespace

Vec2 Simulator::site_position(std::span<const double> q, int site, const EnvOverrides& ov) const {
  Workspace ws;
  kinematics(q, {}, ov, ws);
  const auto& s = sites_[static_cast<std::size_t>(site)];
  return ws.origin[s.body] + rotate(ws.angle[s.body], s.local);
}

double Simulator::contact_spring_energy(std::span<const double> q, const SimParams& params,
                                        const Heightfield& terrain, const EnvOverrides& ov) const {
  Workspace ws;
  kinematics(q, {}, ov, ws);
  double e = 0.0;
  for (const auto& s : sites_) {
    const Vec2 p = ws.origin[s.body] + rotate(ws.angle[s.body], s.local);
    const SiteGeometry g = s.kind == ContactKind::kWheel ? wheel_geometry(p, morphology_.wheel_radius, terrain)
                                                         : point_geometry(p, terrain);
    if (g.penetration > 0.0) e += 0.5 * params.contact_stiffness * g.penetration * g.penetration;
  }
  return e;
}

void Simulator::substep(SimState& state, int env, std::span<const double> leg_targets,
                        std::span<const double> wheel_targets, const SimParams& params, const EnvOverrides& ov,
                        const Heightfield& terrain, Workspace& ws, StepProfile* profile) const {
  using Clock = std::chrono::steady_clock;
  const auto t0 = profile ? Clock::now() : Clock::time_point{};

  auto q = state.q_env(env);
  auto v = state.v_env(env);
  const int nj = morphology_.num_joints();
  const int nd = nj + 3;
  const double dt = params.dt;

  kinematics(q, v, ov, ws);
  assemble_mass(ws);
  assemble_bias(ws, params.gravity, {});
  const auto t1 = profile ? Clock::now() : Clock::time_point{};

  // Contacts. The spring acts on the end-of-substep penetration,
  // f_n = k*(delta - dt*vn') - c*vn', solved implicitly with the rest of the
  // system. Explicit damping is unstable on light link tips, and a late spring
  // lets sites sink a full substep before any force appears.
  const double mu = terrain.friction.value_or(ov.friction);
  const int ns = static_cast<int>(sites_.size());
  const double k_n = params.contact_stiffness;
  const double c_eff = params.contact_damping + dt * k_n;
  for (int c = 0; c < ns; ++c) {
    const auto& site = sites_[static_cast<std::size_t>(c)];
    auto& ce = ws.contacts[static_cast<std::size_t>(c)];
    const Vec2 p = ws.origin[site.body] + rotate(ws.angle[site.body], site.local);
    const SiteGeometry g = site.kind == ContactKind::kWheel ? wheel_geometry(p, morphology_.wheel_radius, terrain)
                                                            : point_geometry(p, terrain);
    ce.point = g.point;
    ce.normal = g.normal;
    ce.tangent = Vec2{g.normal.y(), -g.normal.x()};
    ce.penetration = g.penetration;
    ce.normal_force = 0.0;
    ce.active = false;
    ce.mode = FrictionMode::kNone;
    if (g.penetration <= -kSpeculativeMargin) continue;

    ce.jn.setZero(nd);
    ce.jt.setZero(nd);
    for (int a = 0; a < 3; ++a) {
      const Vec2 u = point_velocity(ws.S[a], g.point);
      ce.jn[a] = g.normal.dot(u);
      ce.jt[a] = ce.tangent.dot(u);
    }
    for (int k : support_[static_cast<std::size_t>(site.body)]) {
      const Vec2 u = point_velocity(ws.S[3 + k], g.point);
      ce.jn[3 + k] = g.normal.dot(u);
      ce.jt[3 + k] = ce.tangent.dot(u);
    }
    // First estimate of the normal force from the current velocity; refined
    // by the solve below.
    const double fn0 = k_n * g.penetration - c_eff * ce.jn.dot(ws.v);
    if (g.penetration <= 0.0 && fn0 <= 0.0) continue;
    ce.active = true;
    ce.normal_force = std::max(fn0, 0.0);
    // Loaded contacts start out sticking; the solve demotes them to sliding
    // when the implicit tangential velocity leaves the stiction band.
    if (mu > 0.0) ce.mode = FrictionMode::kStick;
  }
  const auto t2 = profile ? Clock::now() : Clock::time_point{};

  // Actuators. Unsaturated joints have their damping term treated implicitly;
  // saturated joints apply a constant limit torque. Saturation is decided from
  // the implicit solution, never from the current velocity: a stiff servo on a
  // light wheel would overshoot otherwise.
  struct Drive {
    double damping = 0.0;
    double pd_stiff = 0.0;  // kp * (q_des - q) (leg) or kd * v_des (wheel)
    double limit = 0.0;
    bool saturated = false;
    bool locked = false;
    double sat_sign = 0.0;
  };
  std::array<Drive, kMaxJoints> drive{};
  const double strength = ov.motor_strength;
  int leg_i = 0;
  int wheel_i = 0;
  for (int j = 0; j < nj; ++j) {
    const auto& spec = morphology_.joints[static_cast<std::size_t>(j)];
    auto& d = drive[static_cast<std::size_t>(j)];
    d.limit = spec.torque_limit;
    d.damping = spec.kd * ov.gain_scale;
    if (spec.kind == JointKind::kLeg) {
      d.pd_stiff = spec.kp * ov.gain_scale * (leg_targets[static_cast<std::size_t>(leg_i++)] - q[3 + j]);
    } else {
      d.pd_stiff = d.damping * wheel_targets[static_cast<std::size_t>(wheel_i++)];
      d.locked = params.lock_wheels;
    }
  }

  // Active-set iteration: joints only ever enter saturation, contacts only
  // ever separate or move from stick to slip. The friction bound uses the
  // normal force of the previous pass, so passes also repeat until that
  // estimate has converged.
  DofVector v_new(nd);
  const DofVector momentum = ws.M * ws.v;
  constexpr int kMaxPasses = 60;
  for (int pass = 0; pass < kMaxPasses; ++pass) {
    DofMatrix A = ws.M;
    DofVector force = -ws.bias;
    for (int j = 0; j < nj; ++j) {
      const auto& d = drive[static_cast<std::size_t>(j)];
      if (d.locked) continue;
      if (d.saturated) {
        force[3 + j] += strength * d.sat_sign * d.limit;
      } else {
        force[3 + j] += strength * d.pd_stiff;
        A(3 + j, 3 + j) += dt * strength * d.damping;
      }
    }
    for (int c = 0; c < ns; ++c) {
      const auto& ce = ws.contacts[static_cast<std::size_t>(c)];
      if (!ce.active) continue;
      force.noalias() += (k_n * ce.penetration) * ce.jn;
      A.noalias() += (dt * c_eff) * ce.jn * ce.jn.transpose();
      if (ce.mode == FrictionMode::kStick) {
        A.noalias() += (dt * mu * ce.normal_force / params.stiction_velocity) * ce.jt * ce.jt.transpose();
      } else if (ce.mode == FrictionMode::kSlip) {
        force.noalias() += (-mu * ce.normal_force * ce.slip_sign) * ce.jt;
      }
    }
    DofVector rhs = momentum + dt * force;
    for (int j = 0; j < nj; ++j) {
      if (!drive[static_cast<std::size_t>(j)].locked) continue;
      A.row(3 + j).setZero();
      A.col(3 + j).setZero();
      A(3 + j, 3 + j) = 1.0;
      rhs[3 + j] = 0.0;
    }
    Eigen::LLT<DofMatrix> llt(A);
    if (llt.info() != Eigen::Success) {
      throw std::runtime_error("mass matrix is not positive definite (morphology '" + morphology_.name + "')");
    }
    v_new = llt.solve(rhs);

    bool changed = false;
    for (int j = 0; j < nj; ++j) {
      auto& d = drive[static_cast<std::size_t>(j)];
      if (d.locked || d.saturated) continue;
      const double tau = d.pd_stiff - d.damping * v_new[3 + j];
      if (std::abs(tau) > d.limit) {
        d.saturated = true;
        d.sat_sign = tau > 0.0 ? 1.0 : -1.0;
        changed = true;
      }
    }
    for (int c = 0; c < ns; ++c) {
      auto& ce = ws.contacts[static_cast<std::size_t>(c)];
      if (!ce.active) continue;
      const double fn = k_n * ce.penetration - c_eff * ce.jn.dot(v_new);
      if (fn <= 0.0) {
        ce.active = false;
        ce.normal_force = 0.0;
        ce.mode = FrictionMode::kNone;
        changed = true;
        continue;
      }
      if (std::abs(fn - ce.normal_force) > 1e-12 * (1.0 + fn)) changed = true;
      ce.normal_force = fn;
      if (ce.mode != FrictionMode::kStick) continue;
      const double vt = ce.jt.dot(v_new);
      if (std::abs(vt) > params.stiction_velocity) {
        ce.mode = FrictionMode::kSlip;
        ce.slip_sign = vt > 0.0 ? 1.0 : -1.0;
        changed = true;
      }
    }
    if (!changed) break;
  }
  const auto t3 = profile ? Clock::now() : Clock::time_point{};

  // Commit: semi-implicit Euler (velocity first, then position).
  auto tau_out = state.torques_env(env);
  double* work = state.positive_work.data() + env * state.num_joints;
  for (int j = 0; j < nj; ++j) {
    const auto& d = drive[static_cast<std::size_t>(j)];
    double tau = 0.0;
    if (!d.locked) {
      tau = d.saturated ? strength * d.sat_sign * d.limit : strength * (d.pd_stiff - d.damping * v_new[3 + j]);
    }
    tau_out[static_cast<std::size_t>(j)] = tau;
    work[j] += std::max(tau * v_new[3 + j], 0.0) * dt;
  }
  auto records = state.contacts_env(env);
  for (int c = 0; c < ns; ++c) {
    const auto& ce = ws.contacts[static_cast<std::size_t>(c)];
    auto& r = records[static_cast<std::size_t>(c)];
    r.point = ce.point;
    r.penetration = ce.penetration;
    r.in_contact = ce.active;
    r.normal_force = ce.normal_force;
    if (!ce.active) {
      r.tangential_force = 0.0;
      r.slip_speed = 0.0;
      continue;
    }
    const double vt = ce.jt.dot(v_new);
    r.slip_speed = std::abs(vt);
    if (ce.mode == FrictionMode::kStick) {
      r.tangential_force = -mu * ce.normal_force * vt / params.stiction_velocity;
    } else if (ce.mode == FrictionMode::kSlip) {
      r.tangential_force = -mu * ce.normal_force * ce.slip_sign;
    } else {
      r.tangential_force = 0.0;
    }
  }

  bool finite = true;
  for (int d = 0; d < nd; ++d) {
    v[d] = v_new[d];
    q[d] += dt * v_new[d];
    finite = finite && std::isfinite(v[d]) && std::isfinite(q[d]);
  }
  state.time[static_cast<std::size_t>(env)] += dt;
  if (!finite) state.faulted[static_cast<std::size_t>(env)] = 1;

  if (profile) {
    profile->assembly_s += std::chrono::duration<double>(t1 - t0).count();
    profile->contact_s += std::chrono::duration<double>(t2 - t1).count();
    profile->solve_s += std::chrono::duration<double>(t3 - t2).count() +
                        std::chrono::duration<double>(Clock::now() - t3).count();
    profile->substeps += 1;
  }
}

void Simulator::step_env(SimState& state, int env, const ActuatorCommand& cmd, const SimParams& params,
                         const Heightfield& terrain, StepProfile* profile) const {
  const auto e = static_cast<std::size_t>(env);
  const auto nl = static_cast<std::size_t>(morphology_.n_leg_joints);
  const auto nw = static_cast<std::size_t>(morphology_.n_wheels);
  if (cmd.leg_targets.size() != nl * static_cast<std::size_t>(state.num_envs) ||
      cmd.wheel_targets.size() != nw * static_cast<std::size_t>(state.num_envs)) {
    throw DimensionError("actuator command does not match morphology x env count");
  }
  const std::span<const double> legs(cmd.leg_targets.data() + e * nl, nl);
  const std::span<const double> wheels(cmd.wheel_targets.data() + e * nw, nw);
  std::fill_n(state.positive_work.begin() + static_cast<std::ptrdiff_t>(e) * state.num_joints, state.num_joints,
              0.0);
  if (state.faulted[e]) return;

  const EnvOverrides ov = params.env(env);
  Workspace ws;
  for (int s = 0; s < params.substeps; ++s) {
    bool finite = true;
    for (double x : state.q_env(env)) finite = finite && std::isfinite(x);
    for (double x : state.v_env(env)) finite = finite && std::isfinite(x);
    if (!finite) {
      state.faulted[e] = 1;
      return;
    }
    substep(state, env, legs, wheels, params, ov, terrain, ws, profile);
    if (state.faulted[e]) return;
  }
}

void Simulator::step(SimState& state, const ActuatorCommand& cmd, const SimParams& params,
                     std::span<const Heightfield* const> terrains, Execution exec, StepProfile* profile) const {
  if (terrains.size() != static_cast<std::size_t>(state.num_envs)) {
    throw DimensionError("need one terrain per environment");
  }
  if (exec == Execution::kSerial || profile != nullptr) {
    for (int e = 0; e < state.num_envs; ++e) step_env(state, e, cmd, params, *terrains[static_cast<std::size_t>(e)], profile);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
#pragma omp parallel for schedule(static)
  for (int e = 0; e < state.num_envs; ++e) {
    try {
      step_env(state, e, cmd, params, *terrains[static_cast<std::size_t>(e)]);
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

void Simulator::place_on_terrain(SimState& s, int e, double x, std::span<const double> joint_q,
                                 const Heightfield& terrain, double pitch, double sink) const {
  if (joint_q.size() != static_cast<std::size_t>(morphology_.num_joints())) {
    throw DimensionError("joint configuration does not match morphology");
  }
  auto q = s.q_env(e);
  auto v = s.v_env(e);
  q[0] = x;
  q[1] = 0.0;
  q[2] = pitch;
  std::copy(joint_q.begin(), joint_q.end(), q.begin() + 3);
  std::fill(v.begin(), v.end(), 0.0);

  Workspace ws;
  kinematics(q, {}, EnvOverrides{}, ws);
  double lift = -std::numeric_limits<double>::infinity();
  for (const auto& site : sites_) {
    const Vec2 p = ws.origin[site.body] + rotate(ws.angle[site.body], site.local);
    const double clearance = site.kind == ContactKind::kWheel ? morphology_.wheel_radius : 0.0;
    lift = std::max(lift, height_at(terrain, p.x()) + clearance - p.y());
  }
  q[1] = std::isfinite(lift) ? lift - sink : 0.0;

  const auto ue = static_cast<std::size_t>(e);
  s.time[ue] = 0.0;
  s.faulted[ue] = 0;
  std::fill_n(s.torques.begin() + static_cast<std::ptrdiff_t>(ue) * s.num_joints, s.num_joints, 0.0);
  std::fill_n(s.positive_work.begin() + static_cast<std::ptrdiff_t>(ue) * s.num_joints, s.num_joints, 0.0);
  for (auto& r : s.contacts_env(e)) r = ContactRecord{};
}

BodyVelocity body_velocity(const SimState& s, int env) {
  const auto q = s.q_env(env);
  const auto v = s.v_env(env);
  const double c = std::cos(q[2]);
  const double sn = std::sin(q[2]);
  BodyVelocity out;
  out.linear = {c * v[0] + sn * v[1], 0.0, -sn * v[0] + c * v[1]};
  out.angular = {0.0, v[2], 0.0};
  return out;
}

std::array<double, 3> projected_gravity(const SimState& s, int env) {
  const double pitch = s.q_env(env)[2];
  return {-std::sin(pitch), 0.0, -std::cos(pitch)};
}

double mechanical_power(const SimState& s, int env) {
  const auto tau = s.torques_env(env);
  const auto v = s.v_env(env);
  double p = 0.0;
  for (int j = 0; j < s.num_joints; ++j) p += std::max(tau[static_cast<std::size_t>(j)] * v[3 + j], 0.0);
  return p;
}

SimState settle_stand_pose(const Simulator& sim, const SimParams& params, const Heightfield& terrain,
                           double duration, double x) {
  const Morphology& m = sim.morphology();
  SimParams nominal = params;
  nominal.overrides.clear();
  SimState s = sim.make_state(1);
  const auto ref = m.reference_pose();
  sim.place_on_terrain(s, 0, x, ref, terrain);

  ActuatorCommand cmd;
  cmd.leg_targets.assign(ref.begin(), ref.begin() + m.n_leg_joints);
  cmd.wheel_targets.assign(static_cast<std::size_t>(m.n_wheels), 0.0);
  const Heightfield* terrains[] = {&terrain};
  const auto steps = static_cast<int>(std::llround(duration / nominal.control_dt()));
  for (int i = 0; i < steps; ++i) sim.step(s, cmd, nominal, terrains, Execution::kSerial);
  s.time[0] = 0.0;
  return s;
}

void write_trajectory_record(std::ostream& out, const SimState& s, int e) {
  nlohmann::json j;
  j["env"] = e;
  j["t"] = s.time[static_cast<std::size_t>(e)];
  const auto q = s.q_env(e);
  const auto v = s.v_env(e);
  const auto tau = s.torques_env(e);
  j["q"] = std::vector<double>(q.begin(), q.end());
  j["v"] = std::vector<double>(v.begin(), v.end());
  j["tau"] = std::vector<double>(tau.begin(), tau.end());
  j["contacts"] = nlohmann::json::array();
  for (const auto& c : s.contacts_env(e)) {
    j["contacts"].push_back({{"x", c.point.x()},
                             {"z", c.point.y()},
                             {"fn", c.normal_force},
                             {"ft", c.tangential_force},
                             {"slip", c.slip_speed},
                             {"contact", c.in_contact}});
  }
  out << j.dump() << '\n';
}

}  // namespace wheelleg
