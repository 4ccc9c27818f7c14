#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "wheelleg/config.hpp"
#include "wheelleg/eval.hpp"
#include "wheelleg/trainer.hpp"

namespace wheelleg {
namespace {

using nlohmann::json;

RunConfig small_config(std::uint64_t seed = 3) {
  RunConfig c;
  c.seed = seed;
  c.num_envs = 4;
  c.horizon = 12;
  c.iterations = 2;
  c.network.prpn_hidden = {32};
  c.network.actor_hidden = {32};
  c.network.critic_hidden = {32};
  c.network.latent = 4;
  c.env.history_length = 4;
  c.ppo.epochs = 2;
  c.ppo.minibatches = 2;
  return c;
}

json strip_timing(json j) {
  for (const char* k : kTimingKeys) j.erase(k);
  return j;
}

std::string config_error_key(const json& j) {
  try {
    config_from_json(j);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<none>";
}

TEST(Config, DefaultsRoundTrip) {
  const RunConfig c = config_from_json(json::object());
  EXPECT_EQ(c.num_envs, 256);
  EXPECT_EQ(c.horizon, 100);
  EXPECT_EQ(to_json(config_from_json(to_json(c))), to_json(c));
}

TEST(Config, UnknownKeyNamed) {
  EXPECT_EQ(config_error_key({{"pp0", {{"gamma", 0.9}}}}), "pp0");
  EXPECT_EQ(config_error_key({{"ppo", {{"gamma", 0.9}, {"gamme", 0.9}}}}), "ppo.gamme");
  EXPECT_EQ(config_error_key({{"env", {{"sim", {{"dtt", 0.01}}}}}}), "env.sim.dtt");
}

TEST(Config, TypeAndRangeErrorsNamed) {
  EXPECT_EQ(config_error_key({{"num_envs", "many"}}), "num_envs");
  EXPECT_EQ(config_error_key({{"num_envs", 0}}), "num_envs");
  EXPECT_EQ(config_error_key({{"ppo", {{"gamma", 1.5}}}}), "ppo.gamma");
  EXPECT_EQ(config_error_key({{"terrain", {{"kinds", {"lava"}}}}}), "terrain.kinds");
  EXPECT_EQ(config_error_key({{"morphology", "hexapod"}}), "morphology");
  EXPECT_EQ(config_error_key({{"env", {{"randomization", {{"friction", {1.0, 0.5}}}}}}}), "env.randomization.friction");
}

TEST(Config, OverridesApply) {
  const RunConfig c = config_from_json({{"env", {{"fixed_command", 1.0}, {"sim", {{"lock_wheels", true}}}}},
                                        {"terrain", {{"kinds", {"flat"}}}},
                                        {"network", {{"latent", 8}}}});
  EXPECT_TRUE(c.env.sim.lock_wheels);
  ASSERT_TRUE(c.env.fixed_command.has_value());
  EXPECT_DOUBLE_EQ(*c.env.fixed_command, 1.0);
  ASSERT_EQ(c.env.terrain.kinds.size(), 1u);
  EXPECT_EQ(c.env.terrain.kinds[0], TerrainKind::kFlat);
  EXPECT_EQ(c.network_dims().obs_dim, 27);
  EXPECT_EQ(c.network_dims().act_dim, 6);
  EXPECT_EQ(c.network_dims().latent, 8);
}

TEST(Config, DimensionOnlyMorphologyRejected) {
  EXPECT_EQ(config_error_key({{"morphology", "go2w-dims"}}), "morphology");
}

TEST(Config, InlineMorphology) {
  const json m = morphology_to_json(morphology_by_name("planar-ref"));
  const RunConfig c = config_from_json({{"morphology", m}});
  EXPECT_EQ(c.morphology().name, "planar-ref");
  EXPECT_EQ(to_json(c)["morphology"], m);
}

TEST(Trainer, RecordsAccountForEverySample) {
  Trainer t(small_config());
  const IterationRecord r = t.iterate();
  EXPECT_EQ(r.iteration, 0);
  EXPECT_EQ(r.env_steps, 4 * 12);
  EXPECT_EQ(r.update.minibatches, 2 * 2);
  EXPECT_EQ(t.iteration(), 1);
  const json j = r.to_json();
  for (const char* key : {"iteration", "wall_time", "mean_return", "reward_terms", "mean_level", "approx_kl",
                          "policy_loss", "value_loss", "learning_rate", "env_steps_per_s"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j["reward_terms"].size(), static_cast<std::size_t>(kNumRewardTerms));
}

TEST(Trainer, SameSeedSameMetricsAndCheckpoint) {
  Trainer a(small_config(5)), b(small_config(5));
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(strip_timing(a.iterate().to_json()), strip_timing(b.iterate().to_json()));
  }
  const Checkpoint ca = a.checkpoint(), cb = b.checkpoint();
  EXPECT_EQ(ca.params, cb.params);
  EXPECT_EQ(ca.adam_m, cb.adam_m);
  EXPECT_EQ(ca.rng_state, cb.rng_state);
  EXPECT_EQ(ca.config_json, cb.config_json);
}

TEST(Trainer, RestoreRejectsOtherMorphology) {
  Trainer a(small_config());
  RunConfig other = small_config();
  other.morphology_inline = morphology_to_json(morphology_by_name("planar-ref"));
  other.morphology_inline["name"] = "planar-variant";
  other.morphology_name = "planar-variant";
  Trainer b(other);
  EXPECT_THROW(b.restore(a.checkpoint()), MorphologyMismatch);
}

TEST(Eval, ProfileShapes) {
  EXPECT_DOUBLE_EQ(profile_command(CommandProfile::kConstant, 1.0, 7.0, 20.0), 1.0);
  EXPECT_DOUBLE_EQ(profile_command(CommandProfile::kTrapezoid, 1.0, 0.0, 20.0), 0.0);
  EXPECT_DOUBLE_EQ(profile_command(CommandProfile::kTrapezoid, 1.0, 2.5, 20.0), 0.5);
  EXPECT_DOUBLE_EQ(profile_command(CommandProfile::kTrapezoid, 1.0, 10.0, 20.0), 1.0);
  EXPECT_DOUBLE_EQ(profile_command(CommandProfile::kTrapezoid, 1.0, 20.0, 20.0), 0.0);
  EXPECT_DOUBLE_EQ(profile_command(CommandProfile::kStopAndGo, 1.0, 1.0, 20.0), 1.0);
  EXPECT_DOUBLE_EQ(profile_command(CommandProfile::kStopAndGo, 1.0, 3.0, 20.0), 0.0);
  EXPECT_EQ(command_profile_from_string(to_string(CommandProfile::kStopAndGo)), CommandProfile::kStopAndGo);
  EXPECT_THROW(command_profile_from_string("zigzag"), ArgumentError);
}

TEST(Eval, ZeroPolicyStandsStill) {
  RunConfig c = small_config();
  c.env.episode_length_s = 4.0;
  PpoLearner learner(c.network_dims(), c.ppo, 1);
  std::fill(learner.mutable_params().begin(), learner.mutable_params().end(), 0.0f);
  EvalOptions o;
  o.speed = 0.0;
  o.episodes = 3;
  const EvalReport r = evaluate(learner, c.morphology(), c.env, o);
  ASSERT_EQ(r.episodes.size(), 3u);
  EXPECT_EQ(r.fall_rate(), 0.0);
  for (const EpisodeReport& e : r.episodes) {
    EXPECT_EQ(e.steps, 200);
    EXPECT_GE(e.cost_of_transport, 0.0);
    EXPECT_GE(e.wheel_duty, 0.0);
    EXPECT_LE(e.wheel_duty, 1.0);
    EXPECT_LT(std::abs(e.distance), 0.01);
  }
  EXPECT_LT(r.mean_cost_of_transport(), 0.05);
  EXPECT_LT(r.mean_tracking_error(), 0.01);
}

TEST(Eval, EpisodesMustBePositive) {
  RunConfig c = small_config();
  PpoLearner learner(c.network_dims(), c.ppo, 1);
  EvalOptions o;
  o.episodes = 0;
  EXPECT_THROW(evaluate(learner, c.morphology(), c.env, o), ArgumentError);
}

TEST(Eval, CheckpointRoundTripGivesSameReport) {
  RunConfig c = small_config();
  c.env.episode_length_s = 2.0;
  Trainer t(c);
  t.iterate();
  EvalOptions o;
  o.episodes = 2;
  o.terrain = "stairs-up";
  o.profile = CommandProfile::kTrapezoid;
  const EvalReport before = evaluate(t.learner(), c.morphology(), c.env, o);

  const auto dir = std::filesystem::temp_directory_path() / "wheelleg_harness_test";
  std::filesystem::create_directories(dir);
  save_checkpoint((dir / "ck").string(), t.checkpoint());
  Trainer fresh(c);
  fresh.restore(load_checkpoint((dir / "ck.json").string()));
  const EvalReport after = evaluate(fresh.learner(), c.morphology(), c.env, o);
  EXPECT_TRUE(before == after);
  std::filesystem::remove_all(dir);

  std::ostringstream csv;
  after.write_csv(csv);
  const std::string text = csv.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}

TEST(Eval, StochasticEvalLeavesLearnerUntouched) {
  RunConfig c = small_config();
  c.env.episode_length_s = 1.0;
  PpoLearner learner(c.network_dims(), c.ppo, 1);
  const std::string before = learner.rng().state();
  EvalOptions o;
  o.episodes = 2;
  o.deterministic = false;
  evaluate(learner, c.morphology(), c.env, o);
  EXPECT_EQ(learner.rng().state(), before);
}

}  // namespace
}  // namespace wheelleg
