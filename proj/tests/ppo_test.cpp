#include "wheelleg/ppo.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "oracles.hpp"

namespace wheelleg {
namespace {

TEST(GaeTest, HandComputedExample) {
  const std::vector<double> r = {1, 1, 1}, v = {0, 0, 0}, boot = {0};
  const std::vector<std::uint8_t> d = {0, 0, 0};
  const GaeResult g = compute_gae(r, v, d, boot, 0.5, 0.5, 3, 1);
  EXPECT_DOUBLE_EQ(g.advantages[0], 1.3125);
  EXPECT_DOUBLE_EQ(g.advantages[1], 1.25);
  EXPECT_DOUBLE_EQ(g.advantages[2], 1.0);
  EXPECT_EQ(g.returns, g.advantages);
}

TEST(GaeTest, LambdaOneEqualsDiscountedRewardToGo) {
  EXPECT_LT(oracle::gae_reward_to_go_error(1), 1e-10);
  EXPECT_LT(oracle::gae_reward_to_go_error(2), 1e-10);
}

TEST(GaeTest, DoneMasksEverythingAfterIt) {
  // T = 4, N = 1, done at t = 1.
  std::vector<double> r = {0.5, -1.0, 2.0, 3.0}, v = {0.1, 0.2, 0.3, 0.4}, boot = {5.0};
  const std::vector<std::uint8_t> d = {0, 1, 0, 0};
  const GaeResult a = compute_gae(r, v, d, boot, 0.9, 0.8, 4, 1);
  r[2] = -40.0;
  r[3] = 17.0;
  boot[0] = -3.0;
  const GaeResult b = compute_gae(r, v, d, boot, 0.9, 0.8, 4, 1);
  EXPECT_EQ(a.advantages[0], b.advantages[0]);
  EXPECT_EQ(a.advantages[1], b.advantages[1]);
  EXPECT_DOUBLE_EQ(a.advantages[1], -1.0 - 0.2);
}

TEST(GaeTest, ShapeMismatchThrows) {
  const std::vector<double> r(6), v(5), boot(2);
  const std::vector<std::uint8_t> d(6);
  EXPECT_THROW(compute_gae(r, v, d, boot, 0.9, 0.9, 3, 2), DimensionError);
}

TEST(GaeTest, NormalizationGivesZeroMeanUnitStd) {
  Rng rng(3);
  std::vector<double> a(257);
  for (auto& x : a) x = 5.0 + 3.0 * rng.normal();
  normalize_advantages(a);
  const double mean = std::accumulate(a.begin(), a.end(), 0.0) / a.size();
  double var = 0.0;
  for (double x : a) var += (x - mean) * (x - mean);
  EXPECT_LT(std::abs(mean), 1e-6);
  EXPECT_NEAR(std::sqrt(var / (a.size() - 1)), 1.0, 1e-6);
  std::vector<double> one = {4.0};
  normalize_advantages(one);
  EXPECT_EQ(one[0], 4.0);
}

struct LossFixture {
  PolicyNetwork net{oracle::planar_dims()};
  std::vector<double> p;
  Minibatch<double> mb;
  LossFixture() {
    Rng rng(21);
    p = oracle::random_params(net, rng);
    mb = oracle::random_minibatch(net, p, 6, rng);
  }
  std::vector<double> current_log_probs() const {
    const auto enc = net.encode<double>(p, mb.histories);
    const Matrix<double> mean = net.actor_mean<double>(p, net.actor_input<double>(mb.obs, enc.velocity, enc.latent));
    std::vector<double> lp;
    for (int i = 0; i < mb.size(); ++i) {
      lp.push_back(gaussian_log_prob<double>({mean.row(i).data(), 6}, net.log_std<double>(p), {mb.actions.row(i).data(), 6}));
    }
    return lp;
  }
};

TEST(LossTest, IdentityRatio) {
  LossFixture f;
  f.mb.old_log_prob = f.current_log_probs();
  const LossStats s = ppo_loss<double>(f.net, f.p, f.mb, PpoConfig{});
  const double mean_adv = std::accumulate(f.mb.advantages.begin(), f.mb.advantages.end(), 0.0) / f.mb.size();
  EXPECT_NEAR(s.policy, -mean_adv, 1e-12);
  EXPECT_NEAR(s.approx_kl, 0.0, 1e-12);
  EXPECT_EQ(s.clip_fraction, 0.0);
}

TEST(LossTest, ClampExampleAndSurrogateBound) {
  LossFixture f;
  const std::vector<double> lp = f.current_log_probs();
  // Row 0: ratio 1.5 with A = +1 gives min(1.5, 1.2) = 1.2.
  for (int i = 0; i < f.mb.size(); ++i) {
    f.mb.old_log_prob[static_cast<std::size_t>(i)] = lp[static_cast<std::size_t>(i)] - std::log(1.5);
    f.mb.advantages[static_cast<std::size_t>(i)] = 1.0;
  }
  const LossStats s = ppo_loss<double>(f.net, f.p, f.mb, PpoConfig{});
  EXPECT_NEAR(s.policy, -1.2, 1e-12);
  EXPECT_NEAR(s.clip_fraction, 1.0, 1e-12);

  // Per-sample: the clipped surrogate never exceeds the unclipped one.
  Rng rng(2);
  for (int k = 0; k < 1000; ++k) {
    const double ratio = std::exp(rng.uniform(-1.0, 1.0));
    const double adv = rng.normal();
    const double clipped = std::min(ratio * adv, std::clamp(ratio, 0.8, 1.2) * adv);
    EXPECT_LE(clipped, ratio * adv);
  }
}

TEST(LossTest, PerfectVelocityPredictionHasZeroAux) {
  LossFixture f;
  f.mb.true_velocity = f.net.encode<double>(f.p, f.mb.histories).velocity;
  EXPECT_EQ(ppo_loss<double>(f.net, f.p, f.mb, PpoConfig{}).aux, 0.0);
}

TEST(LossTest, TotalCombinesTermsWithCoefficients) {
  LossFixture f;
  PpoConfig c;
  c.value_coef = 0.7;
  c.entropy_coef = 0.03;
  c.aux_coef = 2.0;
  const LossStats s = ppo_loss<double>(f.net, f.p, f.mb, c);
  EXPECT_NEAR(s.total, s.policy + 0.7 * s.value - 0.03 * s.entropy + 2.0 * s.aux, 1e-12);
}

TEST(AdamTest, FirstStepMovesByLearningRate) {
  Adam adam(2);
  std::vector<float> p = {1.0f, -2.0f};
  const std::vector<float> g = {0.5f, -3.0f};
  adam.step(p, g, 0.1);
  // After one step m_hat = g and v_hat = g^2, so each entry moves by lr * sign(g).
  EXPECT_NEAR(p[0], 0.9f, 1e-6);
  EXPECT_NEAR(p[1], -1.9f, 1e-6);
  EXPECT_EQ(adam.steps(), 1);
}

NetworkDims bandit_dims() {
  NetworkDims d;
  d.obs_dim = 4;
  d.privileged_dim = 2;
  d.act_dim = 2;
  d.history = 1;
  d.latent = 2;
  d.prpn_hidden = {16};
  d.actor_hidden = {32, 32};
  d.critic_hidden = {32};
  return d;
}

/// One-step episodes with reward -|a - a*|^2 from a fixed observation.
RolloutBuffer bandit_rollout(PpoLearner& learner, const std::vector<float>& target, int N, double* mean_reward) {
  const NetworkDims& d = learner.network().dims();
  RolloutBuffer buf(1, N, d);
  for (int e = 0; e < N; ++e) {
    for (int k = 0; k < d.obs_dim; ++k) buf.obs[static_cast<std::size_t>(e * d.obs_dim + k)] = 0.1f * (k + 1);
  }
  buf.histories = buf.obs;
  const ActOutput out = learner.act(buf.histories, buf.obs, buf.privileged, false);
  buf.actions = out.actions;
  buf.log_probs = out.log_probs;
  double total = 0.0;
  for (int e = 0; e < N; ++e) {
    double r = 0.0;
    for (int j = 0; j < d.act_dim; ++j) {
      const double diff = out.actions[static_cast<std::size_t>(e * d.act_dim + j)] - target[static_cast<std::size_t>(j)];
      r -= diff * diff;
    }
    buf.rewards[static_cast<std::size_t>(e)] = r;
    buf.values[static_cast<std::size_t>(e)] = out.values[static_cast<std::size_t>(e)];
    buf.dones[static_cast<std::size_t>(e)] = 1;
    total += r;
  }
  if (mean_reward) *mean_reward = total / N;
  return buf;
}

TEST(UpdateTest, BanditMeanConvergesToTheOptimum) {
  const std::vector<float> target = {0.5f, -0.3f};
  for (std::uint64_t seed : {1, 2, 3}) {
    PpoLearner learner(bandit_dims(), PpoConfig{}, seed);
    double initial = 0.0, final_reward = 0.0;
    bandit_rollout(learner, target, 64, &initial);
    int converged_at = -1;
    for (int it = 0; it < 300; ++it) {
      const RolloutBuffer buf = bandit_rollout(learner, target, 64, &final_reward);
      const UpdateStats st = learner.update(buf);
      ASSERT_EQ(st.skipped, 0);
      ASSERT_GE(st.learning_rate, 1e-5);
      ASSERT_LE(st.learning_rate, 1e-2);
      const ActOutput m = learner.act(buf.histories, buf.obs, buf.privileged, true);
      if (std::abs(m.mean[0] - target[0]) < 0.05 && std::abs(m.mean[1] - target[1]) < 0.05) {
        converged_at = it;
        break;
      }
    }
    EXPECT_GE(converged_at, 0) << "seed " << seed;
    EXPECT_GT(final_reward, initial) << "seed " << seed;
  }
}

TEST(UpdateTest, ZeroAdvantageLeavesThePolicyUntouched) {
  PpoConfig cfg;
  cfg.entropy_coef = 0.0;
  cfg.aux_coef = 0.0;
  PpoLearner learner(bandit_dims(), cfg, 4);
  RolloutBuffer buf = bandit_rollout(learner, {0.0f, 0.0f}, 32, nullptr);
  // A constant advantage of 0.5 normalizes to exactly zero, while the
  // returns still differ from the values.
  for (std::size_t i = 0; i < buf.rewards.size(); ++i) buf.rewards[i] = buf.values[i] + 0.5;
  const std::vector<float> before(learner.params().begin(), learner.params().end());
  learner.update(buf);
  const auto [cb, ce] = learner.network().critic_range();
  bool critic_moved = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (i >= cb && i < ce) {
      critic_moved |= learner.params()[i] != before[i];
    } else {
      ASSERT_EQ(learner.params()[i], before[i]) << i;
    }
  }
  EXPECT_TRUE(critic_moved);
}

TEST(UpdateTest, SameSeedSameStats) {
  auto run = [] {
    PpoLearner learner(bandit_dims(), PpoConfig{}, 9);
    std::vector<double> stats;
    for (int it = 0; it < 5; ++it) {
      const UpdateStats s = learner.update(bandit_rollout(learner, {0.2f, 0.1f}, 16, nullptr));
      stats.insert(stats.end(), {s.policy_loss, s.value_loss, s.entropy, s.approx_kl, s.grad_norm, s.learning_rate});
    }
    return std::make_pair(stats, std::vector<float>(learner.params().begin(), learner.params().end()));
  };
  EXPECT_EQ(run(), run());
}

TEST(UpdateTest, NonFiniteMinibatchIsSkipped) {
  PpoLearner learner(bandit_dims(), PpoConfig{}, 5);
  RolloutBuffer buf = bandit_rollout(learner, {0.0f, 0.0f}, 16, nullptr);
  for (int e = 0; e < 16; ++e) buf.obs[static_cast<std::size_t>(e * 4)] = std::numeric_limits<float>::quiet_NaN();
  buf.histories = buf.obs;
  const std::vector<float> before(learner.params().begin(), learner.params().end());
  const UpdateStats st = learner.update(buf);
  EXPECT_EQ(st.skipped, st.minibatches);
  EXPECT_FALSE(st.skipped_report.empty());
  EXPECT_EQ(std::vector<float>(learner.params().begin(), learner.params().end()), before);
}

TEST(UpdateTest, CheckpointRestoreContinuesIdentically) {
  PpoLearner a(bandit_dims(), PpoConfig{}, 6);
  a.update(bandit_rollout(a, {0.3f, 0.3f}, 16, nullptr));
  PpoLearner b(bandit_dims(), PpoConfig{}, 99);
  b.restore(a.checkpoint("bandit", 1));
  const UpdateStats sa = a.update(bandit_rollout(a, {0.3f, 0.3f}, 16, nullptr));
  const UpdateStats sb = b.update(bandit_rollout(b, {0.3f, 0.3f}, 16, nullptr));
  EXPECT_EQ(sa.policy_loss, sb.policy_loss);
  EXPECT_EQ(std::vector<float>(a.params().begin(), a.params().end()),
            std::vector<float>(b.params().begin(), b.params().end()));
}

TEST(ConfigTest, ValidationNamesTheField) {
  PpoConfig c;
  c.gamma = 1.5;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "ppo.gamma");
  }
  c = PpoConfig{};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace wheelleg
