#include "wheelleg/robot_model.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace wheelleg {
namespace {

bool finite_positive(double x) { return std::isfinite(x) && x > 0.0; }

std::string joint_field(const JointSpec& j, const char* field) {
  return "joints[" + j.name + "]." + field;
}

}  // namespace

double Morphology::total_mass() const {
  double m = base_mass;
  for (const auto& l : links) m += l.mass;
  return m;
}

std::vector<double> Morphology::reference_pose() const {
  std::vector<double> q(joints.size(), 0.0);
  for (std::size_t i = 0; i < joints.size(); ++i) {
    if (joints[i].kind == JointKind::kLeg) q[i] = joints[i].default_angle;
  }
  return q;
}

std::vector<Violation> validate(const Morphology& m) {
  std::vector<Violation> out;
  auto fail = [&out](std::string field, std::string reason) {
    out.push_back({std::move(field), std::move(reason)});
  };

  if (m.n_leg_joints < 0 || m.n_wheels < 0) fail("n_leg_joints", "joint counts must be non-negative");
  if (m.n_leg_joints + m.n_wheels != m.num_joints()) {
    fail("joints", "n_leg_joints + n_wheels (" + std::to_string(m.n_leg_joints + m.n_wheels) +
                       ") != joint count (" + std::to_string(m.num_joints()) + ")");
  }
  for (int i = 0; i < m.num_joints(); ++i) {
    const bool expect_leg = i < m.n_leg_joints;
    if ((m.joints[i].kind == JointKind::kLeg) != expect_leg) {
      fail(joint_field(m.joints[i], "kind"), "joint ordering must be legs first, then wheels");
    }
  }
  if (!(m.action_scale_leg > 0.0)) fail("action_scale_leg", "must be > 0");
  if (!(m.action_scale_wheel > 0.0)) fail("action_scale_wheel", "must be > 0");

  // Dimension-only descriptors carry no physical parameters to check.
  if (!m.has_dynamics) return out;

  if (m.n_wheels > 0 && !finite_positive(m.wheel_radius)) {
    fail("wheel_radius", "wheel_radius must be > 0 when n_wheels > 0");
  }
  if (!finite_positive(m.base_mass)) fail("base_mass", "must be > 0");
  if (!finite_positive(m.base_inertia)) fail("base_inertia", "must be > 0");
  if (m.links.size() != m.joints.size()) {
    fail("links", "one link per joint required (got " + std::to_string(m.links.size()) + " links)");
  }
  for (const auto& l : m.links) {
    if (!finite_positive(l.mass)) fail("links[" + l.name + "].mass", "must be > 0");
    if (!finite_positive(l.inertia)) fail("links[" + l.name + "].inertia", "must be > 0");
    if (!(l.length >= 0.0)) fail("links[" + l.name + "].length", "must be >= 0");
  }
  for (int i = 0; i < m.num_joints(); ++i) {
    const auto& j = m.joints[i];
    if (j.parent_link < -1 || j.parent_link >= i) {
      fail(joint_field(j, "parent_link"), "parent must be the base (-1) or an earlier link");
    }
    if (!finite_positive(j.torque_limit)) fail(joint_field(j, "torque_limit"), "must be > 0");
    if (!finite_positive(j.velocity_limit)) fail(joint_field(j, "velocity_limit"), "must be > 0");
    if (!(j.kd >= 0.0)) fail(joint_field(j, "kd"), "must be >= 0");
    if (j.kind == JointKind::kLeg) {
      if (!(j.position_min < j.position_max)) {
        fail(joint_field(j, "position_limits"), "lower limit must be below upper limit");
      }
      if (!finite_positive(j.kp)) fail(joint_field(j, "kp"), "kp must be > 0 for leg joints");
    }
  }
  return out;
}

void require_valid(const Morphology& m) {
  const auto violations = validate(m);
  if (violations.empty()) return;
  std::ostringstream msg;
  msg << "invalid morphology '" << m.name << "':";
  for (const auto& v : violations) msg << "\n  " << v.field << ": " << v.reason;
  throw ValidationError(msg.str());
}

int observation_dim(const Morphology& m) {
  require_valid(m);
  const int n = m.num_joints();
  return 3 + 3 + 3 + n + n + n;
}

int action_dim(const Morphology& m) { return m.num_joints(); }

ActionSplit action_split(const Morphology& m, std::span<const double> action) {
  const auto n = static_cast<std::size_t>(m.num_joints());
  if (action.size() != n) {
    throw DimensionError("action has " + std::to_string(action.size()) + " entries, morphology '" +
                         m.name + "' expects " + std::to_string(n));
  }
  const auto legs = static_cast<std::size_t>(m.n_leg_joints);
  return {action.subspan(0, legs), action.subspan(legs)};
}

std::vector<double> action_concat(std::span<const double> leg, std::span<const double> wheel) {
  std::vector<double> a(leg.begin(), leg.end());
  a.insert(a.end(), wheel.begin(), wheel.end());
  return a;
}

Morphology planar_reference() {
  constexpr double kHalfPi = std::numbers::pi / 2.0;
  constexpr double kLinkLength = 0.25;
  constexpr double kLinkMass = 0.8;
  constexpr double kWheelMass = 0.4;
  constexpr double kWheelRadius = 0.07;

  Morphology m;
  m.name = "planar-ref";
  m.base_mass = 10.0;
  m.base_inertia = 0.25;
  m.wheel_radius = kWheelRadius;
  m.n_leg_joints = 4;
  m.n_wheels = 2;
  m.action_scale_leg = 0.25;
  m.action_scale_wheel = 5.0;
  m.base_contact_points = {Vec2{0.28, -0.05}, Vec2{-0.28, -0.05}};

  const LinkSpec leg_link{"", kLinkMass, kLinkMass * kLinkLength * kLinkLength / 12.0, kLinkLength,
                          kLinkLength / 2.0};
  const LinkSpec wheel_link{"", kWheelMass, 0.5 * kWheelMass * kWheelRadius * kWheelRadius, 0.0, 0.0};

  auto hip = [&](const std::string& name, double x) {
    JointSpec j;
    j.name = name;
    j.kind = JointKind::kLeg;
    j.parent_link = -1;
    j.axis_offset = Vec2{x, 0.0};
    j.zero_angle = -kHalfPi;
    j.position_min = -0.6;
    j.position_max = 2.4;
    j.velocity_limit = 30.0;
    j.torque_limit = 23.0;
    j.kp = 100.0;
    j.kd = 3.0;
    j.default_angle = 0.8;
    return j;
  };
  auto knee = [&](const std::string& name, int parent) {
    JointSpec j;
    j.name = name;
    j.kind = JointKind::kLeg;
    j.parent_link = parent;
    j.axis_offset = Vec2{kLinkLength, 0.0};
    j.position_min = -2.7;
    j.position_max = -0.3;
    j.velocity_limit = 30.0;
    j.torque_limit = 23.0;
    j.kp = 100.0;
    j.kd = 3.0;
    j.default_angle = -1.5;
    return j;
  };
  auto wheel = [&](const std::string& name, int parent) {
    JointSpec j;
    j.name = name;
    j.kind = JointKind::kWheel;
    j.parent_link = parent;
    j.axis_offset = Vec2{kLinkLength, 0.0};
    j.velocity_limit = 30.0;
    j.torque_limit = 8.0;
    j.kd = 2.0;
    return j;
  };

  m.joints = {hip("front_hip", 0.2),   knee("front_knee", 0), hip("rear_hip", -0.2),
              knee("rear_knee", 2),    wheel("front_wheel", 1), wheel("rear_wheel", 3)};
  const char* link_names[] = {"front_thigh", "front_shank", "rear_thigh",
                              "rear_shank",  "front_wheel", "rear_wheel"};
  for (int i = 0; i < 6; ++i) {
    LinkSpec l = m.is_wheel(i) ? wheel_link : leg_link;
    l.name = link_names[i];
    m.links.push_back(l);
  }
  return m;
}

Morphology go2w_dims() {
  Morphology m;
  m.name = "go2w-dims";
  m.has_dynamics = false;
  m.n_leg_joints = 12;
  m.n_wheels = 4;
  for (const char* leg : {"FL", "FR", "RL", "RR"}) {
    for (const char* part : {"hip", "thigh", "calf"}) {
      JointSpec j;
      j.name = std::string(leg) + "_" + part;
      j.kind = JointKind::kLeg;
      m.joints.push_back(j);
    }
  }
  for (const char* leg : {"FL", "FR", "RL", "RR"}) {
    JointSpec j;
    j.name = std::string(leg) + "_wheel";
    j.kind = JointKind::kWheel;
    m.joints.push_back(j);
  }
  return m;
}

Morphology morphology_by_name(const std::string& name) {
  if (name == "planar-ref") return planar_reference();
  if (name == "go2w-dims") return go2w_dims();
  throw ArgumentError("unknown morphology '" + name + "' (expected planar-ref or go2w-dims)");
}

namespace {

JointKind kind_from_string(const std::string& s) {
  if (s == "revolute-leg" || s == "leg") return JointKind::kLeg;
  if (s == "wheel") return JointKind::kWheel;
  throw ValidationError("unknown joint kind '" + s + "'");
}

const char* kind_to_string(JointKind k) { return k == JointKind::kLeg ? "revolute-leg" : "wheel"; }

Vec2 vec2_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) throw ValidationError("expected a 2-element array");
  return Vec2{j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

Morphology morphology_from_json(const nlohmann::json& j) {
  try {
    Morphology m;
    m.name = j.at("name").get<std::string>();
    m.has_dynamics = j.value("has_dynamics", true);
    m.base_mass = j.value("base_mass", 0.0);
    m.base_inertia = j.value("base_inertia", 0.0);
    m.wheel_radius = j.value("wheel_radius", 0.0);
    m.n_leg_joints = j.at("n_leg_joints").get<int>();
    m.n_wheels = j.at("n_wheels").get<int>();
    m.action_scale_leg = j.value("action_scale_leg", 0.25);
    m.action_scale_wheel = j.value("action_scale_wheel", 5.0);
    for (const auto& p : j.value("base_contact_points", nlohmann::json::array())) {
      m.base_contact_points.push_back(vec2_from_json(p));
    }
    for (const auto& l : j.value("links", nlohmann::json::array())) {
      m.links.push_back({l.at("name").get<std::string>(), l.at("mass").get<double>(),
                         l.at("inertia").get<double>(), l.value("length", 0.0),
                         l.value("com_offset", 0.0)});
    }
    for (const auto& jj : j.at("joints")) {
      JointSpec s;
      s.name = jj.at("name").get<std::string>();
      s.kind = kind_from_string(jj.at("kind").get<std::string>());
      s.parent_link = jj.value("parent_link", -1);
      if (jj.contains("axis_offset")) s.axis_offset = vec2_from_json(jj["axis_offset"]);
      s.zero_angle = jj.value("zero_angle", 0.0);
      if (jj.contains("position_limits")) {
        const Vec2 lim = vec2_from_json(jj["position_limits"]);
        s.position_min = lim.x();
        s.position_max = lim.y();
      }
      s.velocity_limit = jj.value("velocity_limit", 0.0);
      s.torque_limit = jj.value("torque_limit", 0.0);
      s.kp = jj.value("kp", 0.0);
      s.kd = jj.value("kd", 0.0);
      s.default_angle = jj.value("default_angle", 0.0);
      m.joints.push_back(s);
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed morphology description: ") + e.what());
  }
}

nlohmann::json morphology_to_json(const Morphology& m) {
  nlohmann::json j;
  j["name"] = m.name;
  j["has_dynamics"] = m.has_dynamics;
  j["base_mass"] = m.base_mass;
  j["base_inertia"] = m.base_inertia;
  j["wheel_radius"] = m.wheel_radius;
  j["n_leg_joints"] = m.n_leg_joints;
  j["n_wheels"] = m.n_wheels;
  j["action_scale_leg"] = m.action_scale_leg;
  j["action_scale_wheel"] = m.action_scale_wheel;
  j["base_contact_points"] = nlohmann::json::array();
  for (const auto& p : m.base_contact_points) j["base_contact_points"].push_back({p.x(), p.y()});
  j["links"] = nlohmann::json::array();
  for (const auto& l : m.links) {
    j["links"].push_back({{"name", l.name},
                          {"mass", l.mass},
                          {"inertia", l.inertia},
                          {"length", l.length},
                          {"com_offset", l.com_offset}});
  }
  j["joints"] = nlohmann::json::array();
  for (const auto& s : m.joints) {
    j["joints"].push_back({{"name", s.name},
                           {"kind", kind_to_string(s.kind)},
                           {"parent_link", s.parent_link},
                           {"axis_offset", {s.axis_offset.x(), s.axis_offset.y()}},
                           {"zero_angle", s.zero_angle},
                           {"position_limits", {s.position_min, s.position_max}},
                           {"velocity_limit", s.velocity_limit},
                           {"torque_limit", s.torque_limit},
                           {"kp", s.kp},
                           {"kd", s.kd},
                           {"default_angle", s.default_angle}});
  }
  return j;
}

}  // namespace wheelleg
