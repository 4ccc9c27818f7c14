#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "wheelleg/types.hpp"

namespace wheelleg {

enum class JointKind { kLeg, kWheel };

/// One actuated joint. Joint i drives link i; `parent_link` is -1 for the base.
struct JointSpec {
  std::string name;
  JointKind kind = JointKind::kLeg;
  int parent_link = -1;
  /// Joint location in the parent frame. For a link parent the first
  /// coordinate runs along the link axis; for the base it is (x fwd, z up).
  Vec2 axis_offset{0.0, 0.0};
  /// Angle of the child link axis relative to the parent axis at q = 0.
  double zero_angle = 0.0;
  double position_min = 0.0;  // leg only
  double position_max = 0.0;  // leg only
  double velocity_limit = 0.0;
  double torque_limit = 0.0;
  double kp = 0.0;  // leg only
  /// Leg: PD damping. Wheel: velocity-servo gain.
  double kd = 0.0;
  double default_angle = 0.0;
};

struct LinkSpec {
  std::string name;
  double mass = 0.0;
  double inertia = 0.0;
  double length = 0.0;
  double com_offset = 0.0;
};

/// Parametric planar robot. Joint ordering is legs first, then wheels; the
/// ordering fixes every joint-indexed vector layout in the project.
struct Morphology {
  std::string name;
  std::vector<LinkSpec> links;
  std::vector<JointSpec> joints;
  double base_mass = 0.0;
  double base_inertia = 0.0;
  /// Base-frame points checked against the terrain (body-collision contacts).
  std::vector<Vec2> base_contact_points;
  double wheel_radius = 0.0;
  int n_leg_joints = 0;
  int n_wheels = 0;
  double action_scale_leg = 0.25;
  double action_scale_wheel = 5.0;
  /// False for dimension-only descriptors that carry no planar dynamics.
  bool has_dynamics = true;

  [[nodiscard]] int num_joints() const { return static_cast<int>(joints.size()); }
  [[nodiscard]] int num_dofs() const { return 3 + num_joints(); }
  [[nodiscard]] bool is_wheel(int joint) const { return joints[joint].kind == JointKind::kWheel; }
  [[nodiscard]] double total_mass() const;
  /// Stand-pose reference configuration (leg entries; wheel entries are 0).
  [[nodiscard]] std::vector<double> reference_pose() const;
};

struct Violation {
  std::string field;
  std::string reason;
};

/// Every invariant violation of `m`; an empty list means valid.
std::vector<Violation> validate(const Morphology& m);

/// Throws `ValidationError` listing all violations when `m` is invalid.
void require_valid(const Morphology& m);

/// 3 (command) + 3 (angular velocity) + 3 (gravity) + q + qdot + previous action.
int observation_dim(const Morphology& m);
int action_dim(const Morphology& m);

struct ActionSplit {
  std::span<const double> leg;
  std::span<const double> wheel;
};

ActionSplit action_split(const Morphology& m, std::span<const double> action);
std::vector<double> action_concat(std::span<const double> leg, std::span<const double> wheel);

/// Two-leg sagittal reference robot: floating base, hip+knee per leg and a
/// wheel at each shank tip (front leg first, then rear).
Morphology planar_reference();

/// Dimension-only Go2W descriptor: 12 leg joints, 4 wheels, no dynamics.
Morphology go2w_dims();

/// "planar-ref" or "go2w-dims".
Morphology morphology_by_name(const std::string& name);

Morphology morphology_from_json(const nlohmann::json& j);
nlohmann::json morphology_to_json(const Morphology& m);

}  // namespace wheelleg
