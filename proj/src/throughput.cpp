#include "wheelleg/throughput.hpp"

#include <chrono>
#include <cmath>

#include <omp.h>

#include "wheelleg/env.hpp"
#include "wheelleg/terrain.hpp"

namespace wheelleg {
namespace {

struct Batch {
  SimState state;
  ActuatorCommand cmd;
  std::vector<const Heightfield*> terrains;
};

Batch make_batch(const Simulator& sim, int n, const Heightfield& ground) {
  const Morphology& m = sim.morphology();
  Batch b{sim.make_state(n), {}, std::vector<const Heightfield*>(static_cast<std::size_t>(n), &ground)};
  const auto ref = m.reference_pose();
  for (int e = 0; e < n; ++e) sim.place_on_terrain(b.state, e, 2.0, ref, ground);
  b.cmd.leg_targets.resize(static_cast<std::size_t>(n * m.n_leg_joints));
  b.cmd.wheel_targets.resize(static_cast<std::size_t>(n * m.n_wheels));
  return b;
}

void randomize_command(const Morphology& m, Rng& rng, int n, double clip, ActuatorCommand& cmd) {
  std::vector<double> action(static_cast<std::size_t>(action_dim(m)));
  const auto nl = static_cast<std::size_t>(m.n_leg_joints);
  const auto nw = static_cast<std::size_t>(m.n_wheels);
  for (int e = 0; e < n; ++e) {
    for (double& a : action) a = rng.uniform(-1.0, 1.0);
    const auto ue = static_cast<std::size_t>(e);
    apply_action(action, m, clip, {cmd.leg_targets.data() + ue * nl, nl}, {cmd.wheel_targets.data() + ue * nw, nw});
  }
}

ThroughputRow run(const Simulator& sim, const SimParams& params, int n, std::int64_t steps, std::uint64_t seed,
                  double clip, Execution exec, StepProfile* profile) {
  const Heightfield ground = flat(200.0);
  Batch b = make_batch(sim, n, ground);
  Rng rng(seed, 0x62656e6368);
  double wall = 0.0;
  for (std::int64_t s = 0; s < steps; ++s) {
    randomize_command(sim.morphology(), rng, n, clip, b.cmd);
    const auto t0 = std::chrono::steady_clock::now();
    sim.step(b.state, b.cmd, params, b.terrains, exec, profile);
    wall += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  ThroughputRow row;
  row.envs = n;
  row.steps = steps;
  row.env_steps = steps * n;
  row.wall_s = wall;
  return row;
}

}  // namespace

nlohmann::json ThroughputReport::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const ThroughputRow& r : rows) {
    rs.push_back({{"envs", r.envs},
                  {"steps", r.steps},
                  {"env_steps", r.env_steps},
                  {"wall_s", r.wall_s},
                  {"env_steps_per_s", r.env_steps_per_s()},
                  {"us_per_env_step", r.us_per_env_step()}});
  }
  const double total = profile.assembly_s + profile.contact_s + profile.solve_s;
  auto share = [total](double x) { return total > 0.0 ? x / total : 0.0; };
  return {{"simulated_seconds", simulated_seconds},
          {"threads", threads},
          {"scaling", rs},
          {"substep_breakdown",
           {{"substeps", profile.substeps},
            {"assembly_s", profile.assembly_s},
            {"contact_s", profile.contact_s},
            {"solve_s", profile.solve_s},
            {"assembly_share", share(profile.assembly_s)},
            {"contact_share", share(profile.contact_s)},
            {"solve_share", share(profile.solve_s)}}}};
}

ThroughputReport measure_throughput(const RunConfig& cfg, double simulated_seconds, Execution exec) {
  if (!(simulated_seconds > 0.0)) throw ArgumentError("--seconds must be positive");
  const Simulator sim(cfg.morphology());
  SimParams params = cfg.env.sim;
  params.overrides.clear();
  const auto steps = std::max<std::int64_t>(1, std::llround(simulated_seconds / params.control_dt()));

  ThroughputReport rep;
  rep.simulated_seconds = simulated_seconds;
  rep.threads = exec == Execution::kParallel ? omp_get_max_threads() : 1;
  for (int n : {1, cfg.num_envs}) {
    rep.rows.push_back(run(sim, params, n, steps, cfg.seed, cfg.env.action_clip, exec, nullptr));
  }
  run(sim, params, cfg.num_envs, steps, cfg.seed, cfg.env.action_clip, Execution::kSerial, &rep.profile);
  return rep;
}

}  // namespace wheelleg
