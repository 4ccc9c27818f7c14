#include "wheelleg/config.hpp"

#include <fstream>

namespace wheelleg {
namespace {

using nlohmann::json;

json range_json(const Range& r) { return json::array({r.lo, r.hi}); }

json reward_json(const RewardWeights& w) {
  json j = json::object();
  for (int i = 0; i < kNumRewardTerms; ++i) {
    j[std::string(kRewardTermNames[static_cast<std::size_t>(i)])] = w.alpha[static_cast<std::size_t>(i)];
  }
  return j;
}

json sim_json(const SimParams& s) {
  return {{"dt", s.dt},
          {"substeps", s.substeps},
          {"gravity", s.gravity},
          {"contact_stiffness", s.contact_stiffness},
          {"contact_damping", s.contact_damping},
          {"friction", s.friction},
          {"stiction_velocity", s.stiction_velocity},
          {"lock_wheels", s.lock_wheels}};
}

json terrain_json(const TerrainParams& t) {
  json kinds = json::array();
  for (TerrainKind k : t.kinds) kinds.push_back(to_string(k));
  return {{"cell_size", t.cell_size}, {"length", t.length}, {"start_pad", t.start_pad}, {"kinds", kinds}};
}

void reject_unknown(const json& user, const json& defaults, const std::string& path) {
  if (!user.is_object() || !defaults.is_object()) return;
  for (const auto& [key, value] : user.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) throw ConfigError(full, "unknown config key '" + full + "'");
    reject_unknown(value, defaults.at(key), full);
  }
}

/// Reads `path` (dotted) from `j` into `out`, converting type errors into
/// ConfigError naming the key.
template <class T>
void read(const json& root, const std::string& path, T& out) {
  const json* node = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(key)) return;
    node = &node->at(key);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    out = node->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path, "config key '" + path + "' has the wrong type: " + node->dump());
  }
}

void read_range(const json& root, const std::string& path, Range& r) {
  std::vector<double> v = {r.lo, r.hi};
  read(root, path, v);
  if (v.size() != 2 || !(v[0] <= v[1])) throw ConfigError(path, "config key '" + path + "' must be [lo, hi] with lo <= hi");
  r = {v[0], v[1]};
}

void require(bool ok, const std::string& key, const std::string& why) {
  if (!ok) throw ConfigError(key, "config key '" + key + "': " + why);
}

}  // namespace

Morphology RunConfig::morphology() const {
  if (!morphology_inline.is_null()) return morphology_from_json(morphology_inline);
  return morphology_by_name(morphology_name);
}

NetworkDims RunConfig::network_dims() const {
  const Morphology m = morphology();
  const Simulator sim(m);
  NetworkDims d = network;
  d.obs_dim = observation_layout(m).size;
  d.privileged_dim = wheelleg::privileged_dim(m, static_cast<int>(sim.contact_sites().size()));
  d.act_dim = action_dim(m);
  d.history = env.history_length;
  return d;
}

json to_json(const RunConfig& c) {
  const EnvParams& e = c.env;
  const RandomizationParams& r = e.randomization;
  const CurriculumParams& cu = e.curriculum;
  const PpoConfig& p = c.ppo;
  return {
      {"morphology", c.morphology_inline.is_null() ? json(c.morphology_name) : c.morphology_inline},
      {"seed", c.seed},
      {"num_envs", c.num_envs},
      {"horizon", c.horizon},
      {"iterations", c.iterations},
      {"checkpoint_interval", c.checkpoint_interval},
      {"output_dir", c.output_dir},
      {"terrain", terrain_json(e.terrain)},
      {"env",
       {{"episode_length_s", e.episode_length_s},
        {"fall_height", e.fall_height},
        {"fall_pitch", e.fall_pitch},
        {"action_clip", e.action_clip},
        {"spawn_x", e.spawn_x},
        {"history_length", e.history_length},
        {"fixed_command", e.fixed_command ? json(*e.fixed_command) : json(nullptr)},
        {"sim", sim_json(e.sim)},
        {"reward", reward_json(e.reward)},
        {"noise", {{"q", e.noise.q}, {"qd", e.noise.qd}, {"angular", e.noise.angular}, {"gravity", e.noise.gravity}}},
        {"randomization",
         {{"enabled", r.enabled},
          {"mass_scale", range_json(r.mass_scale)},
          {"payload", range_json(r.payload)},
          {"com_shift", range_json(r.com_shift)},
          {"friction", range_json(r.friction)},
          {"motor_strength", range_json(r.motor_strength)},
          {"gain_scale", range_json(r.gain_scale)},
          {"max_delay", r.max_delay},
          {"joint_perturbation", r.joint_perturbation},
          {"push_interval_s", r.push_interval_s},
          {"push_velocity", r.push_velocity}}},
        {"curriculum",
         {{"levels", cu.levels},
          {"variations", cu.variations},
          {"promote_tracking", cu.promote_tracking},
          {"promote_distance", cu.promote_distance},
          {"demote_distance", cu.demote_distance},
          {"command_initial", range_json(cu.command_initial)},
          {"command_max", range_json(cu.command_max)}}}}},
      {"network",
       {{"latent", c.network.latent},
        {"prpn_hidden", c.network.prpn_hidden},
        {"actor_hidden", c.network.actor_hidden},
        {"critic_hidden", c.network.critic_hidden},
        {"log_std_init", c.network.log_std_init}}},
      {"ppo",
       {{"gamma", p.gamma},
        {"lambda", p.lambda},
        {"clip", p.clip},
        {"epochs", p.epochs},
        {"minibatches", p.minibatches},
        {"value_coef", p.value_coef},
        {"entropy_coef", p.entropy_coef},
        {"aux_coef", p.aux_coef},
        {"max_grad_norm", p.max_grad_norm},
        {"kl_target", p.kl_target},
        {"learning_rate", p.learning_rate},
        {"lr_min", p.lr_min},
        {"lr_max", p.lr_max},
        {"adaptive_lr", p.adaptive_lr},
        {"stop_velocity_gradient", p.stop_velocity_gradient}}},
  };
}

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("", "config root must be an object");
  json defaults = to_json(RunConfig{});
  // An inline morphology is validated by the morphology loader instead.
  json user = j;
  json inline_morphology;
  if (user.contains("morphology") && user["morphology"].is_object()) {
    inline_morphology = user["morphology"];
    user.erase("morphology");
  }
  reject_unknown(user, defaults, "");

  RunConfig c;
  if (!inline_morphology.is_null()) {
    c.morphology_inline = inline_morphology;
    try {
      c.morphology_name = morphology_from_json(inline_morphology).name;
    } catch (const std::exception& e) {
      throw ConfigError("morphology", std::string("inline morphology is invalid: ") + e.what());
    }
  } else {
    read(user, "morphology", c.morphology_name);
    try {
      morphology_by_name(c.morphology_name);
    } catch (const std::exception& e) {
      throw ConfigError("morphology", e.what());
    }
  }
  if (!c.morphology().has_dynamics) {
    throw ConfigError("morphology", "morphology '" + c.morphology_name +
                                        "' is dimension-only; training and evaluation need planar dynamics");
  }
  read(user, "seed", c.seed);
  read(user, "num_envs", c.num_envs);
  read(user, "horizon", c.horizon);
  read(user, "iterations", c.iterations);
  read(user, "checkpoint_interval", c.checkpoint_interval);
  read(user, "output_dir", c.output_dir);
  require(c.num_envs >= 1, "num_envs", "must be >= 1");
  require(c.horizon >= 1, "horizon", "must be >= 1");
  require(c.iterations >= 0, "iterations", "must be >= 0");
  require(c.checkpoint_interval >= 1, "checkpoint_interval", "must be >= 1");

  TerrainParams& t = c.env.terrain;
  read(user, "terrain.cell_size", t.cell_size);
  read(user, "terrain.length", t.length);
  read(user, "terrain.start_pad", t.start_pad);
  std::vector<std::string> kinds;
  for (TerrainKind k : t.kinds) kinds.push_back(to_string(k));
  read(user, "terrain.kinds", kinds);
  t.kinds.clear();
  for (const auto& k : kinds) {
    try {
      t.kinds.push_back(terrain_kind_from_string(k));
    } catch (const std::exception& e) {
      throw ConfigError("terrain.kinds", e.what());
    }
  }
  require(!t.kinds.empty(), "terrain.kinds", "needs at least one terrain kind");
  require(t.cell_size > 0.0, "terrain.cell_size", "must be positive");
  require(t.length > t.start_pad, "terrain.length", "must exceed terrain.start_pad");

  EnvParams& e = c.env;
  read(user, "env.episode_length_s", e.episode_length_s);
  read(user, "env.fall_height", e.fall_height);
  read(user, "env.fall_pitch", e.fall_pitch);
  read(user, "env.action_clip", e.action_clip);
  read(user, "env.spawn_x", e.spawn_x);
  read(user, "env.history_length", e.history_length);
  if (user.contains("env") && user["env"].contains("fixed_command")) {
    const json& fc = user["env"]["fixed_command"];
    if (fc.is_null()) {
      e.fixed_command.reset();
    } else if (fc.is_number()) {
      e.fixed_command = fc.get<double>();
    } else {
      throw ConfigError("env.fixed_command", "config key 'env.fixed_command' must be a number or null");
    }
  }
  require(e.episode_length_s > 0.0, "env.episode_length_s", "must be positive");
  require(e.history_length >= 1, "env.history_length", "must be >= 1");
  require(e.action_clip > 0.0, "env.action_clip", "must be positive");

  SimParams& s = e.sim;
  read(user, "env.sim.dt", s.dt);
  read(user, "env.sim.substeps", s.substeps);
  read(user, "env.sim.gravity", s.gravity);
  read(user, "env.sim.contact_stiffness", s.contact_stiffness);
  read(user, "env.sim.contact_damping", s.contact_damping);
  read(user, "env.sim.friction", s.friction);
  read(user, "env.sim.stiction_velocity", s.stiction_velocity);
  read(user, "env.sim.lock_wheels", s.lock_wheels);
  require(s.dt > 0.0, "env.sim.dt", "must be positive");
  require(s.substeps >= 1, "env.sim.substeps", "must be >= 1");
  require(s.contact_stiffness > 0.0, "env.sim.contact_stiffness", "must be positive");
  require(s.stiction_velocity > 0.0, "env.sim.stiction_velocity", "must be positive");

  for (int i = 0; i < kNumRewardTerms; ++i) {
    read(user, "env.reward." + std::string(kRewardTermNames[static_cast<std::size_t>(i)]),
         e.reward.alpha[static_cast<std::size_t>(i)]);
  }
  read(user, "env.noise.q", e.noise.q);
  read(user, "env.noise.qd", e.noise.qd);
  read(user, "env.noise.angular", e.noise.angular);
  read(user, "env.noise.gravity", e.noise.gravity);

  RandomizationParams& r = e.randomization;
  read(user, "env.randomization.enabled", r.enabled);
  read_range(user, "env.randomization.mass_scale", r.mass_scale);
  read_range(user, "env.randomization.payload", r.payload);
  read_range(user, "env.randomization.com_shift", r.com_shift);
  read_range(user, "env.randomization.friction", r.friction);
  read_range(user, "env.randomization.motor_strength", r.motor_strength);
  read_range(user, "env.randomization.gain_scale", r.gain_scale);
  read(user, "env.randomization.max_delay", r.max_delay);
  read(user, "env.randomization.joint_perturbation", r.joint_perturbation);
  read(user, "env.randomization.push_interval_s", r.push_interval_s);
  read(user, "env.randomization.push_velocity", r.push_velocity);
  require(r.max_delay >= 0, "env.randomization.max_delay", "must be >= 0");

  CurriculumParams& cu = e.curriculum;
  read(user, "env.curriculum.levels", cu.levels);
  read(user, "env.curriculum.variations", cu.variations);
  read(user, "env.curriculum.promote_tracking", cu.promote_tracking);
  read(user, "env.curriculum.promote_distance", cu.promote_distance);
  read(user, "env.curriculum.demote_distance", cu.demote_distance);
  read_range(user, "env.curriculum.command_initial", cu.command_initial);
  read_range(user, "env.curriculum.command_max", cu.command_max);
  require(cu.levels >= 1, "env.curriculum.levels", "must be >= 1");
  require(cu.variations >= 1, "env.curriculum.variations", "must be >= 1");
  require(cu.command_max.lo <= cu.command_initial.lo && cu.command_initial.hi <= cu.command_max.hi,
          "env.curriculum.command_initial", "must lie inside env.curriculum.command_max");

  read(user, "network.latent", c.network.latent);
  read(user, "network.prpn_hidden", c.network.prpn_hidden);
  read(user, "network.actor_hidden", c.network.actor_hidden);
  read(user, "network.critic_hidden", c.network.critic_hidden);
  read(user, "network.log_std_init", c.network.log_std_init);
  require(c.network.latent >= 0, "network.latent", "must be >= 0");

  PpoConfig& p = c.ppo;
  read(user, "ppo.gamma", p.gamma);
  read(user, "ppo.lambda", p.lambda);
  read(user, "ppo.clip", p.clip);
  read(user, "ppo.epochs", p.epochs);
  read(user, "ppo.minibatches", p.minibatches);
  read(user, "ppo.value_coef", p.value_coef);
  read(user, "ppo.entropy_coef", p.entropy_coef);
  read(user, "ppo.aux_coef", p.aux_coef);
  read(user, "ppo.max_grad_norm", p.max_grad_norm);
  read(user, "ppo.kl_target", p.kl_target);
  read(user, "ppo.learning_rate", p.learning_rate);
  read(user, "ppo.lr_min", p.lr_min);
  read(user, "ppo.lr_max", p.lr_max);
  read(user, "ppo.adaptive_lr", p.adaptive_lr);
  read(user, "ppo.stop_velocity_gradient", p.stop_velocity_gradient);
  p.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file " + path);
  const json j = json::parse(in, nullptr, false, /*ignore_comments=*/true);
  if (j.is_discarded()) throw ConfigError("", "config file " + path + " is not valid JSON");
  return config_from_json(j);
}

}  // namespace wheelleg
