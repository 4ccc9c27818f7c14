#include "wheelleg/env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>

namespace wheelleg {
namespace {

double wrap_angle(double x) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  return x - kTwoPi * std::ceil((x - std::numbers::pi) / kTwoPi);
}

double noise_in(Rng* rng, double amplitude) { return amplitude > 0.0 ? rng->uniform(-amplitude, amplitude) : 0.0; }

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

int EnvParams::episode_steps() const {
  return static_cast<int>(std::llround(episode_length_s / sim.control_dt()));
}

ObservationLayout observation_layout(const Morphology& m) {
  const int n = m.num_joints();
  ObservationLayout l;
  l.qd = l.q + n;
  l.action = l.qd + n;
  l.size = l.action + n;
  return l;
}

int privileged_dim(const Morphology& /*m*/, int num_sites) { return 3 + 2 * num_sites + 1 + 5 + kHeightSamples; }

void assemble_observation(const SimState& s, int e, const Morphology& m, std::span<const double> command,
                          std::span<const double> prev_action, std::span<double> out, const ObservationNoise* noise,
                          Rng* rng) {
  const ObservationLayout l = observation_layout(m);
  const int n = m.num_joints();
  if (static_cast<int>(out.size()) != l.size || static_cast<int>(prev_action.size()) != n || command.size() != 3) {
    throw DimensionError("observation layout mismatch for morphology '" + m.name + "'");
  }
  const ObservationNoise zero{0.0, 0.0, 0.0, 0.0};
  const ObservationNoise& nz = noise ? *noise : zero;

  std::copy(command.begin(), command.end(), out.begin() + l.command);
  const BodyVelocity bv = body_velocity(s, e);
  const auto g = projected_gravity(s, e);
  for (int i = 0; i < 3; ++i) {
    out[static_cast<std::size_t>(l.angular + i)] = (bv.angular[static_cast<std::size_t>(i)] + noise_in(rng, nz.angular)) * kAngularScale;
    out[static_cast<std::size_t>(l.gravity + i)] = g[static_cast<std::size_t>(i)] + noise_in(rng, nz.gravity);
  }
  const auto q = s.q_env(e);
  const auto v = s.v_env(e);
  for (int j = 0; j < n; ++j) {
    const auto jj = static_cast<std::size_t>(3 + j);
    double qj = q[jj] + noise_in(rng, nz.q);
    if (m.is_wheel(j)) qj = wrap_angle(qj);
    out[static_cast<std::size_t>(l.q + j)] = qj;
    out[static_cast<std::size_t>(l.qd + j)] = (v[jj] + noise_in(rng, nz.qd)) * kJointVelocityScale;
  }
  std::copy(prev_action.begin(), prev_action.end(), out.begin() + l.action);
}

void apply_action(std::span<const double> action, const Morphology& m, double clip, std::span<double> leg_targets,
                  std::span<double> wheel_targets) {
  const ActionSplit split = action_split(m, action);
  if (leg_targets.size() != split.leg.size() || wheel_targets.size() != split.wheel.size()) {
    throw DimensionError("actuator target buffers do not match morphology '" + m.name + "'");
  }
  for (std::size_t i = 0; i < split.leg.size(); ++i) {
    const auto& j = m.joints[i];
    const double a = std::clamp(split.leg[i], -clip, clip);
    leg_targets[i] = std::clamp(m.action_scale_leg * a + j.default_angle, j.position_min, j.position_max);
  }
  for (std::size_t i = 0; i < split.wheel.size(); ++i) {
    const auto& j = m.joints[split.leg.size() + i];
    const double a = std::clamp(split.wheel[i], -clip, clip);
    wheel_targets[i] = std::clamp(m.action_scale_wheel * a, -j.velocity_limit, j.velocity_limit);
  }
}

RewardVector reward_terms(const SimState& next, int e, const Simulator& sim, const RewardInput& in) {
  const Morphology& m = sim.morphology();
  const int nj = m.num_joints();
  RewardVector r{};
  const BodyVelocity bv = body_velocity(next, e);
  const auto g = projected_gravity(next, e);
  const auto v = next.v_env(e);
  const auto tau = next.torques_env(e);
  const auto work = next.work_env(e);

  const double ex = in.command[0] - bv.linear[0];
  r[kLinVel] = std::exp(-ex * ex / 0.25);
  const double ew = in.command[2] - bv.angular[1];
  r[kAngVel] = std::exp(-ew * ew / 0.25);
  r[kZVel] = -bv.linear[2] * bv.linear[2];
  r[kOrientation] = -g[0] * g[0];

  double torque = 0.0;
  double power = 0.0;
  double accel = 0.0;
  for (int j = 0; j < nj; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    torque += tau[ju] * tau[ju];
    power += work[ju] / in.control_dt;
    const double qdd = (v[3 + ju] - in.v_before[3 + ju]) / in.control_dt;
    accel += qdd * qdd;
  }
  r[kTorque] = -torque;
  r[kPower] = -power;
  r[kJointAccel] = -accel;

  double rate = 0.0;
  for (std::size_t i = 0; i < in.action.size(); ++i) {
    const double d = in.action[i] - in.prev_action[i];
    rate += d * d;
  }
  r[kActionRate] = -rate;

  const auto contacts = next.contacts_env(e);
  const auto& sites = sim.contact_sites();
  double slip = 0.0;
  double airspin = 0.0;
  double collisions = 0.0;
  for (std::size_t c = 0; c < sites.size(); ++c) {
    const ContactRecord& rec = contacts[c];
    if (sites[c].kind == ContactKind::kWheel) {
      if (rec.in_contact) {
        slip += rec.slip_speed * rec.slip_speed;
      } else {
        const double w = v[static_cast<std::size_t>(3 + sites[c].body - 1)];
        airspin += w * w;
      }
    } else if (rec.in_contact) {
      collisions += 1.0;
    }
  }
  r[kWheelSlip] = -slip;
  r[kWheelAirspin] = -airspin;
  r[kCollision] = -collisions;
  r[kTermination] = in.fell ? -1.0 : 0.0;
  return r;
}

double weighted_total(const RewardVector& terms, const RewardWeights& w) {
  double total = 0.0;
  for (int i = 0; i < kNumRewardTerms; ++i) total += w.alpha[static_cast<std::size_t>(i)] * terms[static_cast<std::size_t>(i)];
  return total;
}

Randomization randomize(int env_index, std::uint64_t seed, const RandomizationParams& p, const Morphology& m,
                        double base_friction) {
  Randomization out;
  out.overrides.friction = base_friction;
  out.joint_offsets.assign(static_cast<std::size_t>(m.n_leg_joints), 0.0);
  if (!p.enabled) return out;

  Rng rng(seed, static_cast<std::uint64_t>(env_index));
  auto draw = [&rng](const Range& r) { return rng.uniform(r.lo, r.hi); };
  EnvOverrides& o = out.overrides;
  o.mass_scale = draw(p.mass_scale);
  o.payload = draw(p.payload);
  o.com_shift = draw(p.com_shift);
  o.friction = draw(p.friction);
  o.motor_strength = draw(p.motor_strength);
  o.gain_scale = draw(p.gain_scale);
  o.action_delay = static_cast<int>(rng.index(static_cast<std::uint64_t>(std::max(p.max_delay, 0) + 1)));
  for (auto& x : out.joint_offsets) x = rng.uniform(-p.joint_perturbation, p.joint_perturbation);
  return out;
}

double CurriculumState::mean_level() const {
  if (level.empty()) return 0.0;
  return std::accumulate(level.begin(), level.end(), 0.0) / static_cast<double>(level.size());
}

int update_curriculum(CurriculumState& c, int e, const EpisodeOutcome& o, const CurriculumParams& p,
                      double terrain_length) {
  int& lvl = c.level.at(static_cast<std::size_t>(e));
  const int before = lvl;
  if (o.mean_tracking > p.promote_tracking && o.forward_distance > p.promote_distance * terrain_length) {
    lvl = std::min(lvl + 1, p.levels - 1);
  } else if (o.fell && o.forward_distance < p.demote_distance * terrain_length) {
    lvl = std::max(lvl - 1, 0);
  }
  if (lvl > before) ++c.promotions;
  if (lvl < before) ++c.demotions;
  return lvl - before;
}

void update_command_range(CurriculumState& c, const CurriculumParams& p) {
  c.command_range = c.mean_level() >= 0.5 * p.levels ? p.command_max : p.command_initial;
}

double EpisodeStats::cost_of_transport(double gravity) const {
  return energy / (total_mass * gravity * std::max(std::abs(distance), 1e-3));
}

VecEnv::VecEnv(Morphology morphology, EnvParams params, int num_envs, std::uint64_t seed)
    : sim_(std::move(morphology)), params_(std::move(params)), num_envs_(num_envs), seed_(seed) {
  if (num_envs < 1) throw ArgumentError("need at least one environment");
  if (params_.history_length < 1) throw ArgumentError("history length must be >= 1");
  const Morphology& m = sim_.morphology();
  layout_ = observation_layout(m);
  priv_dim_ = wheelleg::privileged_dim(m, static_cast<int>(sim_.contact_sites().size()));
  terrains_ = generate_set(seed, params_.curriculum.levels, params_.curriculum.variations, params_.terrain);

  // Resets start from the settled stand pose rather than the raw reference,
  // so an episode does not begin with the legs sagging under load.
  SimParams nominal = params_.sim;
  nominal.overrides.clear();
  const Heightfield ground = flat(4.0);
  const SimState settled = settle_stand_pose(sim_, nominal, ground, 8.0, 1.0);
  const auto sq = settled.q_env(0);
  stand_pose_.assign(sq.begin() + 3, sq.end());
  for (int j = 0; j < m.num_joints(); ++j) {
    if (m.is_wheel(j)) stand_pose_[static_cast<std::size_t>(j)] = 0.0;
  }
  stand_pitch_ = sq[2];
  SimState touching = sim_.make_state(1);
  sim_.place_on_terrain(touching, 0, sq[0], stand_pose_, ground, stand_pitch_);
  stand_sink_ = std::max(0.0, touching.q_env(0)[1] - sq[1]);

  const auto n = static_cast<std::size_t>(num_envs);
  const auto na = static_cast<std::size_t>(act_dim());
  const auto depth = static_cast<std::size_t>(std::max(params_.randomization.max_delay, 0) + 1);
  params_.sim.overrides.assign(n, EnvOverrides{});
  state_ = sim_.make_state(num_envs);
  terrain_of_.assign(n, nullptr);
  for (int e = 0; e < num_envs; ++e) rng_.emplace_back(seed, static_cast<std::uint64_t>(e) + 1);
  draw_.assign(n, Randomization{});
  episode_count_.assign(n, 0);
  episode_step_.assign(n, 0);
  command_.assign(n * 3, 0.0);
  prev_action_.assign(n * na, 0.0);
  target_fifo_.assign(n * depth * na, 0.0);
  obs_.assign(n * static_cast<std::size_t>(layout_.size), 0.0);
  history_.assign(n * static_cast<std::size_t>(layout_.size * params_.history_length), 0.0);
  priv_.assign(n * static_cast<std::size_t>(priv_dim_), 0.0);
  true_vel_.assign(n * 3, 0.0);
  episode_.assign(n, EpisodeStats{});
  curriculum_.level.assign(n, 0);
  curriculum_.command_range = params_.curriculum.command_initial;
  reset_all();
}

std::span<const double> VecEnv::command(int e) const {
  return {command_.data() + static_cast<std::size_t>(e) * 3, 3};
}

std::uint64_t VecEnv::episode_seed(int e) const {
  return splitmix(seed_ ^ splitmix(static_cast<std::uint64_t>(episode_count_[static_cast<std::size_t>(e)])));
}

void VecEnv::set_terrain_override(const Heightfield* terrain) { terrain_override_ = terrain; }

void VecEnv::set_command(int e, double vx) {
  const auto ue = static_cast<std::size_t>(e);
  command_[ue * 3] = vx;
  // Patch the command slot in place; the rest of the frame is already current.
  const auto od = static_cast<std::size_t>(layout_.size);
  const auto h = static_cast<std::size_t>(params_.history_length);
  obs_[ue * od + static_cast<std::size_t>(layout_.command)] = vx;
  history_[(ue * h + h - 1) * od + static_cast<std::size_t>(layout_.command)] = vx;
}

void VecEnv::reset_all() {
  for (int e = 0; e < num_envs_; ++e) reset_env(e);
}

void VecEnv::reset_env(int e) {
  const auto ue = static_cast<std::size_t>(e);
  const Morphology& m = sim_.morphology();
  const auto na = static_cast<std::size_t>(act_dim());
  Rng& rng = rng_[ue];

  draw_[ue] = randomize(e, episode_seed(e), params_.randomization, m, params_.sim.friction);
  ++episode_count_[ue];
  params_.sim.overrides[ue] = draw_[ue].overrides;

  const int level = curriculum_.level[ue];
  if (terrain_override_) {
    terrain_of_[ue] = terrain_override_;
  } else {
    const auto v = static_cast<int>(rng.index(static_cast<std::uint64_t>(terrains_.variations_per_level)));
    terrain_of_[ue] = &terrains_.at(level, v);
  }

  std::vector<double> joints = stand_pose_;
  for (int j = 0; j < m.n_leg_joints; ++j) joints[static_cast<std::size_t>(j)] += draw_[ue].joint_offsets[static_cast<std::size_t>(j)];
  sim_.place_on_terrain(state_, e, params_.spawn_x, joints, *terrain_of_[ue], stand_pitch_, stand_sink_);

  double* c = command_.data() + ue * 3;
  c[0] = params_.fixed_command ? *params_.fixed_command
                               : rng.uniform(curriculum_.command_range.lo, curriculum_.command_range.hi);
  c[1] = 0.0;
  c[2] = 0.0;

  std::fill_n(prev_action_.begin() + static_cast<std::ptrdiff_t>(ue * na), na, 0.0);
  const auto depth = static_cast<std::size_t>(std::max(params_.randomization.max_delay, 0) + 1);
  double* fifo = target_fifo_.data() + ue * depth * na;
  const std::vector<double> zero(na, 0.0);
  const auto nl = static_cast<std::size_t>(m.n_leg_joints);
  apply_action(zero, m, params_.action_clip, {fifo, nl}, {fifo + nl, na - nl});
  for (std::size_t d = 1; d < depth; ++d) std::copy_n(fifo, na, fifo + d * na);

  EpisodeStats& st = episode_[ue];
  st = EpisodeStats{};
  st.env = e;
  st.start_x = state_.q_env(e)[0];
  st.level = level;
  st.total_mass = sim_.total_mass(draw_[ue].overrides);
  episode_step_[ue] = 0;

  refresh_observation(e, true);
}

void VecEnv::refresh_observation(int e, bool reset_history) {
  const auto ue = static_cast<std::size_t>(e);
  const auto od = static_cast<std::size_t>(layout_.size);
  const auto na = static_cast<std::size_t>(act_dim());
  const std::span<double> out(obs_.data() + ue * od, od);
  assemble_observation(state_, e, sim_.morphology(), command(e), {prev_action_.data() + ue * na, na}, out,
                       params_.training ? &params_.noise : nullptr, &rng_[ue]);

  const auto h = static_cast<std::size_t>(params_.history_length);
  double* hist = history_.data() + ue * h * od;
  if (reset_history) {
    for (std::size_t k = 0; k < h; ++k) std::copy(out.begin(), out.end(), hist + k * od);
  } else {
    std::copy(hist + od, hist + h * od, hist);
    std::copy(out.begin(), out.end(), hist + (h - 1) * od);
  }

  const BodyVelocity bv = body_velocity(state_, e);
  std::copy(bv.linear.begin(), bv.linear.end(), true_vel_.begin() + static_cast<std::ptrdiff_t>(ue * 3));
  fill_privileged(e);
}

void VecEnv::fill_privileged(int e) {
  const auto ue = static_cast<std::size_t>(e);
  double* p = priv_.data() + ue * static_cast<std::size_t>(priv_dim_);
  const BodyVelocity bv = body_velocity(state_, e);
  const auto contacts = state_.contacts_env(e);
  const auto ns = contacts.size();
  const EnvOverrides& ov = draw_[ue].overrides;
  const Heightfield& terrain = *terrain_of_[ue];

  std::size_t k = 0;
  for (double x : bv.linear) p[k++] = x;
  for (const auto& c : contacts) p[k++] = c.in_contact ? 1.0 : 0.0;
  for (const auto& c : contacts) p[k++] = c.normal_force * kForceScale;
  p[k++] = terrain.friction.value_or(ov.friction);
  p[k++] = ov.mass_scale;
  p[k++] = ov.motor_strength;
  p[k++] = ov.com_shift;
  p[k++] = ov.payload;
  p[k++] = ov.action_delay;
  const auto q = state_.q_env(e);
  for (int i = 0; i < kHeightSamples; ++i) {
    const double x = q[0] + kHeightSpacing * (i - kHeightSamples / 2);
    p[k++] = height_at(terrain, x) - q[1];
  }
  (void)ns;
}

StepResult VecEnv::step(std::span<const double> actions, Execution exec) {
  const Morphology& m = sim_.morphology();
  const int n = num_envs_;
  const auto na = static_cast<std::size_t>(act_dim());
  const auto nl = static_cast<std::size_t>(m.n_leg_joints);
  const auto nw = na - nl;
  const auto nd = static_cast<std::size_t>(m.num_dofs());
  const auto od = static_cast<std::size_t>(layout_.size);
  const auto pd = static_cast<std::size_t>(priv_dim_);
  const auto depth = static_cast<std::size_t>(std::max(params_.randomization.max_delay, 0) + 1);
  if (actions.size() != static_cast<std::size_t>(n) * na) {
    throw DimensionError("action batch has " + std::to_string(actions.size()) + " entries, expected " +
                         std::to_string(static_cast<std::size_t>(n) * na));
  }

  // Clipped actions and delayed actuator targets.
  std::vector<double> clipped(actions.begin(), actions.end());
  for (auto& a : clipped) a = std::clamp(a, -params_.action_clip, params_.action_clip);
  ActuatorCommand cmd;
  cmd.leg_targets.resize(static_cast<std::size_t>(n) * nl);
  cmd.wheel_targets.resize(static_cast<std::size_t>(n) * nw);
  for (int e = 0; e < n; ++e) {
    const auto ue = static_cast<std::size_t>(e);
    double* fifo = target_fifo_.data() + ue * depth * na;
    std::copy_backward(fifo, fifo + (depth - 1) * na, fifo + depth * na);
    apply_action({clipped.data() + ue * na, na}, m, params_.action_clip, {fifo, nl}, {fifo + nl, nw});
    const auto delay = static_cast<std::size_t>(std::min<int>(draw_[ue].overrides.action_delay, static_cast<int>(depth) - 1));
    const double* use = fifo + delay * na;
    std::copy_n(use, nl, cmd.leg_targets.begin() + static_cast<std::ptrdiff_t>(ue * nl));
    std::copy_n(use + nl, nw, cmd.wheel_targets.begin() + static_cast<std::ptrdiff_t>(ue * nw));
  }

  const std::vector<double> v_before = state_.v;
  sim_.step(state_, cmd, params_.sim, terrain_of_, exec);

  StepResult res;
  res.reward.assign(static_cast<std::size_t>(n), 0.0);
  res.done.assign(static_cast<std::size_t>(n), 0);
  res.timeout.assign(static_cast<std::size_t>(n), 0);
  res.terminal_obs.assign(static_cast<std::size_t>(n) * od, 0.0);
  res.terminal_privileged.assign(static_cast<std::size_t>(n) * pd, 0.0);
  std::vector<RewardVector> terms(static_cast<std::size_t>(n));
  const int max_steps = params_.episode_steps();
  const double cdt = params_.sim.control_dt();
  const int push_every = static_cast<int>(std::llround(params_.randomization.push_interval_s / cdt));

  // Phase 1: rewards, termination and episode accounting, independent per env.
  auto post_step = [&](int e) {
    const auto ue = static_cast<std::size_t>(e);
    const auto q = state_.q_env(e);
    const bool faulted = state_.faulted[ue] != 0;
    const bool fell = faulted || q[1] - height_at(*terrain_of_[ue], q[0]) < params_.fall_height ||
                      std::abs(q[2]) > params_.fall_pitch;
    const bool timeout = !fell && episode_step_[ue] + 1 >= max_steps;

    RewardVector r{};
    if (faulted) {
      r[kTermination] = -1.0;
    } else {
      RewardInput in;
      in.command = command(e);
      in.action = {clipped.data() + ue * na, na};
      in.prev_action = {prev_action_.data() + ue * na, na};
      in.v_before = {v_before.data() + ue * nd, nd};
      in.control_dt = cdt;
      in.fell = fell;
      r = reward_terms(state_, e, sim_, in);
    }
    terms[ue] = r;
    const double total = weighted_total(r, params_.reward);
    res.reward[ue] = total;

    EpisodeStats& st = episode_[ue];
    st.steps += 1;
    st.ret += total;
    for (int k = 0; k < kNumRewardTerms; ++k) {
      st.term_sums[static_cast<std::size_t>(k)] += params_.reward.alpha[static_cast<std::size_t>(k)] * r[static_cast<std::size_t>(k)];
    }
    if (!faulted) {
      const BodyVelocity bv = body_velocity(state_, e);
      st.tracking_error_sum += std::abs(command(e)[0] - bv.linear[0]);
      st.tracking_sum += r[kLinVel];
      const auto work = state_.work_env(e);
      for (int j = 0; j < m.num_joints(); ++j) {
        st.energy += work[static_cast<std::size_t>(j)];
        if (m.is_wheel(j)) st.wheel_energy += work[static_cast<std::size_t>(j)];
      }
      st.distance = q[0] - st.start_x;
    }
    st.fell = fell;
    st.timeout = timeout;
    st.faulted = faulted;

    std::copy_n(clipped.data() + ue * na, na, prev_action_.begin() + static_cast<std::ptrdiff_t>(ue * na));
    episode_step_[ue] += 1;
    res.done[ue] = fell || timeout;
    res.timeout[ue] = timeout;
    if (res.done[ue]) return;

    if (params_.randomization.enabled && push_every > 0 && episode_step_[ue] % push_every == 0) {
      state_.v_env(e)[0] += rng_[ue].uniform(-params_.randomization.push_velocity, params_.randomization.push_velocity);
    }
    refresh_observation(e, false);
  };

  // Phase 3: terminal snapshot and reset of done envs.
  auto finish = [&](int e) {
    const auto ue = static_cast<std::size_t>(e);
    if (!res.done[ue]) return;
    if (!episode_[ue].faulted) {
      refresh_observation(e, false);
      std::copy_n(obs_.begin() + static_cast<std::ptrdiff_t>(ue * od), od, res.terminal_obs.begin() + static_cast<std::ptrdiff_t>(ue * od));
      std::copy_n(priv_.begin() + static_cast<std::ptrdiff_t>(ue * pd), pd, res.terminal_privileged.begin() + static_cast<std::ptrdiff_t>(ue * pd));
    }
    reset_env(e);
  };

  const bool parallel = exec == Execution::kParallel;
#pragma omp parallel for schedule(static) if (parallel)
  for (int e = 0; e < n; ++e) post_step(e);

  // Phase 2: curriculum and statistics, serial in env order.
  for (int e = 0; e < n; ++e) {
    const auto ue = static_cast<std::size_t>(e);
    for (int k = 0; k < kNumRewardTerms; ++k) {
      res.term_means[static_cast<std::size_t>(k)] +=
          params_.reward.alpha[static_cast<std::size_t>(k)] * terms[ue][static_cast<std::size_t>(k)] / n;
    }
    if (!res.done[ue]) continue;
    const EpisodeStats& st = episode_[ue];
    if (st.faulted) ++res.faults;
    if (!params_.fixed_command || !terrain_override_) {
      EpisodeOutcome o;
      o.mean_tracking = st.steps > 0 ? st.tracking_sum / st.steps : 0.0;
      o.forward_distance = st.distance;
      o.fell = st.fell;
      update_curriculum(curriculum_, e, o, params_.curriculum, terrain_of_[ue]->length());
    }
    res.finished.push_back(st);
  }
  update_command_range(curriculum_, params_.curriculum);

#pragma omp parallel for schedule(static) if (parallel)
  for (int e = 0; e < n; ++e) finish(e);

  if (trajectory_) write_trajectory_record(*trajectory_, state_, 0);
  return res;
}

}  // namespace wheelleg
