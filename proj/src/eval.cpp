#include "wheelleg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "wheelleg/terrain.hpp"

namespace wheelleg {
namespace {

template <class F>
double mean_of(const std::vector<EpisodeReport>& eps, F f) {
  if (eps.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : eps) s += f(e);
  return s / static_cast<double>(eps.size());
}

}  // namespace

std::string to_string(CommandProfile p) {
  switch (p) {
    case CommandProfile::kConstant: return "constant";
    case CommandProfile::kTrapezoid: return "trapezoid";
    case CommandProfile::kStopAndGo: return "stop-and-go";
  }
  return "constant";
}

CommandProfile command_profile_from_string(const std::string& s) {
  if (s == "constant") return CommandProfile::kConstant;
  if (s == "trapezoid") return CommandProfile::kTrapezoid;
  if (s == "stop-and-go") return CommandProfile::kStopAndGo;
  throw ArgumentError("unknown command profile '" + s + "' (constant, trapezoid, stop-and-go)");
}

double profile_command(CommandProfile p, double speed, double t, double duration) {
  switch (p) {
    case CommandProfile::kConstant:
      return speed;
    case CommandProfile::kTrapezoid: {
      const double ramp = 0.25 * duration;
      if (ramp <= 0.0) return speed;
      const double up = std::clamp(t / ramp, 0.0, 1.0);
      const double down = std::clamp((duration - t) / ramp, 0.0, 1.0);
      return speed * std::min(up, down);
    }
    case CommandProfile::kStopAndGo:
      return std::fmod(t, 4.0) < 2.0 ? speed : 0.0;
  }
  return speed;
}

double EvalReport::mean_tracking_error() const {
  return mean_of(episodes, [](const EpisodeReport& e) { return e.tracking_error; });
}
double EvalReport::fall_rate() const {
  return mean_of(episodes, [](const EpisodeReport& e) { return e.fell ? 1.0 : 0.0; });
}
double EvalReport::mean_cost_of_transport() const {
  return mean_of(episodes, [](const EpisodeReport& e) { return e.cost_of_transport; });
}
double EvalReport::mean_wheel_duty() const {
  return mean_of(episodes, [](const EpisodeReport& e) { return e.wheel_duty; });
}
double EvalReport::mean_distance() const {
  return mean_of(episodes, [](const EpisodeReport& e) { return e.distance; });
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json eps = nlohmann::json::array();
  for (const EpisodeReport& e : episodes) {
    nlohmann::json terms = nlohmann::json::object();
    for (int k = 0; k < kNumRewardTerms; ++k) {
      terms[std::string(kRewardTermNames[static_cast<std::size_t>(k)])] = e.reward_terms[static_cast<std::size_t>(k)];
    }
    eps.push_back({{"tracking_error", e.tracking_error},
                   {"distance", e.distance},
                   {"fell", e.fell},
                   {"cost_of_transport", e.cost_of_transport},
                   {"wheel_duty", e.wheel_duty},
                   {"steps", e.steps},
                   {"return", e.ret},
                   {"reward_terms", terms}});
  }
  return {{"terrain", options.terrain},
          {"profile", to_string(options.profile)},
          {"speed", options.speed},
          {"deterministic", options.deterministic},
          {"randomize", options.randomize},
          {"seed", options.seed},
          {"summary",
           {{"episodes", episodes.size()},
            {"mean_tracking_error", mean_tracking_error()},
            {"fall_rate", fall_rate()},
            {"mean_cost_of_transport", mean_cost_of_transport()},
            {"mean_wheel_duty", mean_wheel_duty()},
            {"mean_distance", mean_distance()}}},
          {"episodes", eps}};
}

void EvalReport::write_csv(std::ostream& out) const {
  out << "episode,tracking_error,distance,fell,cost_of_transport,wheel_duty,steps,return";
  for (const auto& name : kRewardTermNames) out << ',' << name;
  out << '\n';
  const auto old = out.precision(17);
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const EpisodeReport& e = episodes[i];
    out << i << ',' << e.tracking_error << ',' << e.distance << ',' << (e.fell ? 1 : 0) << ',' << e.cost_of_transport
        << ',' << e.wheel_duty << ',' << e.steps << ',' << e.ret;
    for (double r : e.reward_terms) out << ',' << r;
    out << '\n';
  }
  out.precision(old);
}

bool EvalReport::operator==(const EvalReport& o) const { return to_json() == o.to_json(); }

EvalReport evaluate(const PpoLearner& learner, const Morphology& morphology, EnvParams params,
                    const EvalOptions& opts, Execution exec) {
  if (opts.episodes < 1) throw ArgumentError("--episodes must be >= 1");
  const Heightfield terrain = named_terrain(opts.terrain, opts.seed);
  const double duration = params.episode_length_s;
  params.training = false;
  params.randomization.enabled = opts.randomize;
  params.fixed_command = profile_command(opts.profile, opts.speed, 0.0, duration);

  PpoLearner policy = learner;
  VecEnv env(morphology, params, opts.episodes, opts.seed);
  env.set_terrain_override(&terrain);
  env.reset_all();

  const int n = opts.episodes;
  const auto un = static_cast<std::size_t>(n);
  const NetworkDims& d = policy.network().dims();
  if (d.obs_dim != env.obs_dim() || d.act_dim != env.act_dim() || d.privileged_dim != env.privileged_dim() ||
      d.history != env.history_length()) {
    throw MorphologyMismatch("policy dims do not match morphology '" + morphology.name + "'");
  }

  EvalReport report;
  report.options = opts;
  report.episodes.resize(un);
  std::vector<std::uint8_t> recorded(un, 0);
  int remaining = n;
  std::vector<float> h, o, p;
  std::vector<double> actions;
  const double cdt = params.sim.control_dt();

  for (int step = 0; remaining > 0; ++step) {
    const double cmd = profile_command(opts.profile, opts.speed, step * cdt, duration);
    for (int e = 0; e < n; ++e) {
      if (!recorded[static_cast<std::size_t>(e)]) env.set_command(e, cmd);
    }
    auto to_f = [](const std::vector<double>& src, std::vector<float>& dst) { dst.assign(src.begin(), src.end()); };
    to_f(env.histories(), h);
    to_f(env.observations(), o);
    to_f(env.privileged(), p);
    const ActOutput out = policy.act(h, o, {}, opts.deterministic);
    actions.assign(out.actions.begin(), out.actions.end());
    const StepResult res = env.step(actions, exec);
    for (const EpisodeStats& st : res.finished) {
      const auto ue = static_cast<std::size_t>(st.env);
      if (recorded[ue]) continue;
      recorded[ue] = 1;
      --remaining;
      EpisodeReport& r = report.episodes[ue];
      r.tracking_error = st.mean_tracking_error();
      r.distance = st.distance;
      r.fell = st.fell;
      r.cost_of_transport = st.cost_of_transport(params.sim.gravity);
      r.wheel_duty = st.wheel_duty();
      r.steps = st.steps;
      r.ret = st.ret;
      for (int k = 0; k < kNumRewardTerms; ++k) {
        const auto uk = static_cast<std::size_t>(k);
        r.reward_terms[uk] = st.steps > 0 ? st.term_sums[uk] / st.steps : 0.0;
      }
    }
  }
  return report;
}

}  // namespace wheelleg
