#include "wheelleg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace wheelleg {
namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

void to_float(const std::vector<double>& src, float* dst) {
  std::transform(src.begin(), src.end(), dst, [](double x) { return static_cast<float>(x); });
}

bool finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

}  // namespace

nlohmann::json IterationRecord::to_json() const {
  nlohmann::json terms = nlohmann::json::object();
  for (int k = 0; k < kNumRewardTerms; ++k) {
    terms[std::string(kRewardTermNames[static_cast<std::size_t>(k)])] = reward_terms[static_cast<std::size_t>(k)];
  }
  return {{"iteration", iteration},
          {"wall_time", wall_time},
          {"env_steps_per_s", env_steps_per_s},
          {"env_steps", env_steps},
          {"episodes", episodes},
          {"mean_return", mean_return},
          {"mean_episode_length", mean_episode_length},
          {"mean_tracking_error", mean_tracking_error},
          {"fall_rate", fall_rate},
          {"mean_level", mean_level},
          {"level_histogram", level_histogram},
          {"reward_terms", terms},
          {"faults", faults},
          {"policy_loss", update.policy_loss},
          {"value_loss", update.value_loss},
          {"entropy", update.entropy},
          {"aux_loss", update.aux_loss},
          {"approx_kl", update.approx_kl},
          {"clip_fraction", update.clip_fraction},
          {"grad_norm", update.grad_norm},
          {"learning_rate", update.learning_rate},
          {"minibatches", update.minibatches},
          {"skipped_minibatches", update.skipped}};
}

std::vector<std::pair<std::string, double>> observation_normalization() {
  return {{"angular", kAngularScale}, {"joint_velocity", kJointVelocityScale}, {"force", kForceScale}};
}

Trainer::Trainer(RunConfig cfg)
    : cfg_(std::move(cfg)),
      env_(cfg_.morphology(), cfg_.env, cfg_.num_envs, cfg_.seed),
      learner_(cfg_.network_dims(), cfg_.ppo, cfg_.seed),
      buffer_(cfg_.horizon, cfg_.num_envs, cfg_.network_dims()),
      start_time_(now_seconds()) {}

void Trainer::collect(IterationRecord& rec) {
  const int T = cfg_.horizon;
  const int N = cfg_.num_envs;
  const auto od = static_cast<std::size_t>(env_.obs_dim());
  const auto pd = static_cast<std::size_t>(env_.privileged_dim());
  const auto hd = od * static_cast<std::size_t>(env_.history_length());
  const auto ad = static_cast<std::size_t>(env_.act_dim());
  const auto n = static_cast<std::size_t>(N);

  std::vector<double> actions(n * ad);
  std::vector<float> term_obs(n * od), term_priv(n * pd);
  double ret_sum = 0.0, len_sum = 0.0, err_sum = 0.0;
  int falls = 0;

  for (int t = 0; t < T; ++t) {
    const auto row = static_cast<std::size_t>(t) * n;
    float* h = buffer_.histories.data() + row * hd;
    float* o = buffer_.obs.data() + row * od;
    float* p = buffer_.privileged.data() + row * pd;
    to_float(env_.histories(), h);
    to_float(env_.observations(), o);
    to_float(env_.privileged(), p);
    to_float(env_.true_velocity(), buffer_.true_velocity.data() + row * kVelocityDim);

    const ActOutput out = learner_.act({h, n * hd}, {o, n * od}, {p, n * pd}, false);
    std::copy(out.actions.begin(), out.actions.end(), buffer_.actions.begin() + static_cast<std::ptrdiff_t>(row * ad));
    std::copy(out.log_probs.begin(), out.log_probs.end(), buffer_.log_probs.begin() + static_cast<std::ptrdiff_t>(row));
    std::copy(out.values.begin(), out.values.end(), buffer_.values.begin() + static_cast<std::ptrdiff_t>(row));
    std::copy(out.actions.begin(), out.actions.end(), actions.begin());

    StepResult res = env_.step(actions);

    // Time limits are not failures: fold the value of the state the episode
    // was cut at back into the reward.
    bool any_timeout = false;
    for (std::size_t e = 0; e < n; ++e) any_timeout |= res.timeout[e] != 0;
    if (any_timeout) {
      to_float(res.terminal_obs, term_obs.data());
      to_float(res.terminal_privileged, term_priv.data());
      const std::vector<float> v = learner_.values(term_obs, term_priv);
      for (std::size_t e = 0; e < n; ++e) {
        if (res.timeout[e]) res.reward[e] += cfg_.ppo.gamma * static_cast<double>(v[e]);
      }
    }
    std::copy(res.reward.begin(), res.reward.end(), buffer_.rewards.begin() + static_cast<std::ptrdiff_t>(row));
    std::copy(res.done.begin(), res.done.end(), buffer_.dones.begin() + static_cast<std::ptrdiff_t>(row));

    for (int k = 0; k < kNumRewardTerms; ++k) {
      rec.reward_terms[static_cast<std::size_t>(k)] += res.term_means[static_cast<std::size_t>(k)] / T;
    }
    for (const EpisodeStats& st : res.finished) {
      ret_sum += st.ret;
      len_sum += st.steps;
      err_sum += st.mean_tracking_error();
      falls += st.fell ? 1 : 0;
    }
    rec.episodes += static_cast<int>(res.finished.size());
    rec.faults += res.faults;
  }

  std::vector<float> o(n * od), p(n * pd);
  to_float(env_.observations(), o.data());
  to_float(env_.privileged(), p.data());
  const std::vector<float> boot = learner_.values(o, p);
  std::copy(boot.begin(), boot.end(), buffer_.bootstrap.begin());

  rec.env_steps = static_cast<std::int64_t>(T) * N;
  if (rec.episodes > 0) {
    rec.mean_return = ret_sum / rec.episodes;
    rec.mean_episode_length = len_sum / rec.episodes;
    rec.mean_tracking_error = err_sum / rec.episodes;
    rec.fall_rate = static_cast<double>(falls) / rec.episodes;
  }
  rec.mean_level = env_.curriculum().mean_level();
  rec.level_histogram.assign(static_cast<std::size_t>(cfg_.env.curriculum.levels), 0);
  for (int l : env_.curriculum().level) ++rec.level_histogram[static_cast<std::size_t>(l)];
}

IterationRecord Trainer::iterate() {
  IterationRecord rec;
  rec.iteration = iteration_;
  const double t0 = now_seconds();
  collect(rec);
  const double collect_time = now_seconds() - t0;

  if (!std::all_of(buffer_.rewards.begin(), buffer_.rewards.end(), [](double r) { return std::isfinite(r); })) {
    throw TrainingCollapse("non-finite reward in rollout at iteration " + std::to_string(iteration_));
  }
  rec.update = learner_.update(buffer_);
  if (rec.update.minibatches > 0 && rec.update.skipped == rec.update.minibatches) {
    throw TrainingCollapse("every minibatch was non-finite at iteration " + std::to_string(iteration_) + ": " +
                           rec.update.skipped_report);
  }
  if (!finite(learner_.params())) {
    throw TrainingCollapse("parameters became non-finite at iteration " + std::to_string(iteration_));
  }

  rec.env_steps_per_s = collect_time > 0.0 ? static_cast<double>(rec.env_steps) / collect_time : 0.0;
  rec.wall_time = now_seconds() - start_time_;
  ++iteration_;
  return rec;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck = learner_.checkpoint(cfg_.morphology().name, iteration_);
  ck.normalization = observation_normalization();
  // Where a run is written is not part of what it computes.
  nlohmann::json config = wheelleg::to_json(cfg_);
  config.erase("output_dir");
  ck.config_json = config.dump();
  return ck;
}

void Trainer::restore(const Checkpoint& ck) {
  if (ck.morphology != cfg_.morphology().name) {
    throw MorphologyMismatch("checkpoint is for morphology '" + ck.morphology + "', config uses '" +
                             cfg_.morphology().name + "'");
  }
  learner_.restore(ck);
  iteration_ = ck.iteration;
}

}  // namespace wheelleg
