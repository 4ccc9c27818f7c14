#include "wheelleg/nn.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <gtest/gtest.h>

#include "oracles.hpp"

namespace wheelleg {
namespace {

NetworkDims tiny_dims() {
  NetworkDims d;
  d.obs_dim = 5;
  d.privileged_dim = 4;
  d.act_dim = 3;
  d.history = 3;
  d.latent = 2;
  d.prpn_hidden = {8, 6};
  d.actor_hidden = {7};
  d.critic_hidden = {9, 4};
  return d;
}

void zero_tensor(const PolicyNetwork& net, std::vector<double>& p, int index) {
  const TensorInfo& t = net.layout().at(index);
  std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), 0.0);
}

void zero_last_layer(const PolicyNetwork& net, const Mlp& m, std::vector<double>& p) {
  zero_tensor(net, p, m.weight(m.num_layers() - 1));
  zero_tensor(net, p, m.bias(m.num_layers() - 1));
}

TEST(LayoutTest, PlanarShapesAndAccounting) {
  const PolicyNetwork net(oracle::planar_dims());
  EXPECT_EQ(net.encoder().in_dim(), 20 * 27);
  EXPECT_EQ(net.encoder().out_dim(), 19);
  EXPECT_EQ(net.actor().in_dim(), 27 + 3 + 16);
  EXPECT_EQ(net.critic().in_dim(), 27 + 32);
  std::size_t sum = 0;
  for (const auto& t : net.layout().tensors()) {
    EXPECT_EQ(t.offset, sum);
    sum += t.size();
  }
  EXPECT_EQ(sum, net.num_params());
  EXPECT_EQ(net.layout().find("actor.l0.weight").rows, 512);
  EXPECT_EQ(net.layout().find("actor.l0.weight").cols, 46);
  EXPECT_EQ(net.critic_range().second, net.num_params());
  EXPECT_EQ(net.encoder_range().second, net.actor_range().first);
}

TEST(MlpTest, OneByOneLinearGradient) {
  ParamLayout layout;
  const Mlp m(layout, "m", 1, {}, 1);
  const double w = 1.7, x = -0.6;
  std::vector<double> p = {w, 0.0}, g(2, 0.0);
  Matrix<double> in(1, 1);
  in << x;
  Mlp::Cache<double> cache;
  const Matrix<double> y = m.forward<double>(layout, p, in, &cache);
  // loss = y^2, dL/dy = 2y
  m.backward<double>(layout, p, cache, 2.0 * y, g);
  EXPECT_DOUBLE_EQ(g[0], 2.0 * w * x * x);
}

TEST(MlpTest, OrthogonalInitialization) {
  ParamLayout layout;
  const Mlp m(layout, "m", 6, {10}, 4);
  std::vector<double> p(layout.total());
  Rng rng(3);
  m.initialize<double>(layout, p, rng, 0.01);
  const TensorInfo& w0 = layout.at(m.weight(0));  // 10 x 6: orthonormal columns
  const Eigen::Map<const Matrix<double>> W0(p.data() + w0.offset, w0.rows, w0.cols);
  EXPECT_TRUE((W0.transpose() * W0).isApprox(2.0 * Eigen::MatrixXd::Identity(6, 6), 1e-12));
  const TensorInfo& w1 = layout.at(m.weight(1));  // 4 x 10: orthonormal rows
  const Eigen::Map<const Matrix<double>> W1(p.data() + w1.offset, w1.rows, w1.cols);
  EXPECT_TRUE((W1 * W1.transpose()).isApprox(1e-4 * Eigen::MatrixXd::Identity(4, 4), 1e-12));
}

TEST(EncoderTest, ZeroFinalLayerGivesZeroOutputs) {
  const PolicyNetwork net(tiny_dims());
  std::vector<double> p = net.initial_params<double>(1);
  zero_last_layer(net, net.encoder(), p);
  const auto out = net.encode<double>(p, Matrix<double>::Zero(4, 15));
  EXPECT_TRUE(out.velocity.isZero(0.0));
  EXPECT_TRUE(out.latent.isZero(0.0));
}

TEST(EncoderTest, IdenticalRowsAndBoundedLatent) {
  const PolicyNetwork net(tiny_dims());
  Rng rng(5);
  const std::vector<double> p = oracle::random_params(net, rng);
  Matrix<double> h = 20.0 * oracle::random_matrix(6, 15, rng);
  h.row(3) = h.row(1);
  const auto out = net.encode<double>(p, h);
  EXPECT_EQ(out.velocity.row(1), out.velocity.row(3));
  EXPECT_EQ(out.latent.row(1), out.latent.row(3));
  EXPECT_LE(out.latent.cwiseAbs().maxCoeff(), 1.0);
}

TEST(EncoderTest, SmallInputChangeGivesSmallOutputChange) {
  const PolicyNetwork net(tiny_dims());
  Rng rng(6);
  const std::vector<double> p = oracle::random_params(net, rng);
  const Matrix<double> h = oracle::random_matrix(1, 15, rng);
  const auto base = net.encode<double>(p, h);
  for (double eps : {1e-3, 1e-5}) {
    Matrix<double> hp = h;
    hp(0, 7) += eps;
    const auto out = net.encode<double>(p, hp);
    const double dv = (out.velocity - base.velocity).norm() + (out.latent - base.latent).norm();
    EXPECT_LT(dv, 50.0 * eps);
  }
}

TEST(EncoderTest, WrongHistoryWidthThrows) {
  const PolicyNetwork net(tiny_dims());
  const std::vector<double> p = net.initial_params<double>(1);
  EXPECT_THROW(net.encode<double>(p, Matrix<double>::Zero(2, 14)), DimensionError);
}

TEST(ActorTest, ZeroOutputLayerGivesZeroMeanAndInitialStd) {
  const PolicyNetwork net(tiny_dims());
  std::vector<double> p = net.initial_params<double>(2);
  zero_last_layer(net, net.actor(), p);
  Rng rng(1);
  const Matrix<double> in = oracle::random_matrix(5, net.actor().in_dim(), rng);
  EXPECT_TRUE(net.actor_mean<double>(p, in).isZero(0.0));
  for (double s : net.log_std<double>(p)) EXPECT_NEAR(std::exp(s), 0.6065, 1e-4);
}

TEST(ActorTest, LogProbMatchesDirectDensity) {
  Rng rng(2);
  const std::vector<double> mean = {0.3, -1.2, 0.0}, ls = {-0.5, 0.2, -2.0}, x = {0.1, -0.4, 0.05};
  double density = 1.0;
  for (int j = 0; j < 3; ++j) {
    const double sd = std::exp(ls[static_cast<std::size_t>(j)]);
    const double u = (x[static_cast<std::size_t>(j)] - mean[static_cast<std::size_t>(j)]) / sd;
    density *= std::exp(-0.5 * u * u) / (sd * std::sqrt(2.0 * std::numbers::pi));
  }
  EXPECT_NEAR(gaussian_log_prob<double>(mean, ls, x), std::log(density), 1e-12);
  const double h = 3 * 0.5 * (1.0 + std::log(2.0 * std::numbers::pi)) + (-0.5 + 0.2 - 2.0);
  EXPECT_NEAR(gaussian_entropy<double>(ls), h, 1e-12);
}

TEST(CriticTest, ZeroOutputLayerAndIdenticalRows) {
  const PolicyNetwork net(tiny_dims());
  std::vector<double> p = net.initial_params<double>(3);
  Rng rng(4);
  Matrix<double> in = oracle::random_matrix(4, net.critic().in_dim(), rng);
  in.row(2) = in.row(0);
  const Matrix<double> v = net.value<double>(p, in);
  EXPECT_EQ(v.cols(), 1);
  EXPECT_EQ(v(0, 0), v(2, 0));
  zero_last_layer(net, net.critic(), p);
  EXPECT_TRUE(net.value<double>(p, in).isZero(0.0));
}

TEST(GradientTest, FullLossMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto r = oracle::ppo_gradient_check(seed);
    EXPECT_EQ(r.coordinates, 10);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(GradientTest, EveryTensorMatchesFiniteDifferencesOnTinyNet) {
  const PolicyNetwork net(tiny_dims());
  Rng rng(7);
  std::vector<double> p = oracle::random_params(net, rng);
  const Minibatch<double> mb = oracle::random_minibatch(net, p, 5, rng);
  PpoConfig cfg;
  cfg.stop_velocity_gradient = false;
  std::vector<double> g(p.size());
  ppo_loss<double>(net, p, mb, cfg, g);
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + 1e-6;
    const double up = ppo_loss<double>(net, p, mb, cfg).total;
    p[i] = saved - 1e-6;
    const double down = ppo_loss<double>(net, p, mb, cfg).total;
    p[i] = saved;
    const double fd = (up - down) / 2e-6;
    worst = std::max(worst, std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-6}));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(GradientTest, UnusedCriticGetsExactlyZero) {
  const PolicyNetwork net(tiny_dims());
  Rng rng(8);
  const std::vector<double> p = oracle::random_params(net, rng);
  const Minibatch<double> mb = oracle::random_minibatch(net, p, 4, rng);
  PpoConfig cfg;
  cfg.value_coef = 0.0;
  std::vector<double> g(p.size());
  ppo_loss<double>(net, p, mb, cfg, g);
  const auto [b, e] = net.critic_range();
  for (std::size_t i = b; i < e; ++i) ASSERT_EQ(g[i], 0.0) << i;
}

TEST(GradientTest, StopGradientLeavesOnlyAuxOnVelocityHead) {
  const PolicyNetwork net(tiny_dims());
  Rng rng(9);
  const std::vector<double> p = oracle::random_params(net, rng);
  const Minibatch<double> mb = oracle::random_minibatch(net, p, 4, rng);
  PpoConfig full;
  std::vector<double> g(p.size()), g_aux(p.size());
  ppo_loss<double>(net, p, mb, full, g);
  PpoConfig aux_only = full;
  aux_only.value_coef = 0.0;
  aux_only.entropy_coef = 0.0;
  std::vector<double> zero_adv(4, 0.0);
  Minibatch<double> mb0 = mb;
  mb0.advantages = zero_adv;
  ppo_loss<double>(net, p, mb0, aux_only, g_aux);
  // Rows 0..2 of the encoder output layer produce v_hat.
  const Mlp& enc = net.encoder();
  const TensorInfo& w = net.layout().at(enc.weight(enc.num_layers() - 1));
  for (int r = 0; r < kVelocityDim; ++r) {
    for (int c = 0; c < w.cols; ++c) {
      const std::size_t i = w.offset + static_cast<std::size_t>(r * w.cols + c);
      EXPECT_NEAR(g[i], g_aux[i], 1e-14);
    }
  }
}

TEST(FlattenTest, RoundTripAndErrors) {
  const PolicyNetwork net(tiny_dims());
  const std::vector<float> p = net.initial_params<float>(11);
  FlatParams flat = flatten(net, p);
  EXPECT_EQ(flat.layout.total(), flat.values.size());
  EXPECT_EQ(unflatten(net, flat), p);
  flat.values.pop_back();
  try {
    unflatten(net, flat);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(p.size())), std::string::npos);
    EXPECT_NE(std::string(e.what()).find(std::to_string(p.size() - 1)), std::string::npos);
  }
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("wheelleg_ck_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(CheckpointTest, SaveLoadRoundTrip) {
  const PolicyNetwork net(tiny_dims());
  Checkpoint ck;
  ck.morphology = "planar-ref";
  ck.dims = tiny_dims();
  ck.params = net.initial_params<float>(4);
  ck.adam_m.assign(ck.params.size(), 0.25f);
  ck.adam_v.assign(ck.params.size(), 0.5f);
  ck.adam_step = 12;
  ck.learning_rate = 1e-3;
  ck.iteration = 7;
  ck.rng_state = Rng(5).state();
  ck.normalization = {{"angular", 0.25}};
  ck.config_json = R"({"seed":3})";
  const std::string stem = (dir_ / "ck").string();
  save_checkpoint(stem, ck);
  EXPECT_TRUE(std::filesystem::exists(stem + ".json"));
  EXPECT_EQ(std::filesystem::file_size(stem + ".bin"), 3 * ck.params.size() * sizeof(float));

  for (const std::string& path : {stem, stem + ".json", stem + ".bin"}) {
    const Checkpoint back = load_checkpoint(path);
    EXPECT_EQ(back.params, ck.params);
    EXPECT_EQ(back.adam_m, ck.adam_m);
    EXPECT_EQ(back.adam_v, ck.adam_v);
    EXPECT_EQ(back.adam_step, 12);
    EXPECT_EQ(back.iteration, 7);
    EXPECT_EQ(back.dims, ck.dims);
    EXPECT_EQ(back.rng_state, ck.rng_state);
    EXPECT_EQ(back.morphology, "planar-ref");
    EXPECT_EQ(back.config_json, ck.config_json);
  }
}

TEST_F(CheckpointTest, CorruptionIsDetected) {
  const PolicyNetwork net(tiny_dims());
  Checkpoint ck;
  ck.morphology = "planar-ref";
  ck.dims = tiny_dims();
  ck.params = net.initial_params<float>(4);
  const std::string stem = (dir_ / "ck").string();
  save_checkpoint(stem, ck);

  std::filesystem::resize_file(stem + ".bin", 40);
  EXPECT_THROW(load_checkpoint(stem), CheckpointError);

  save_checkpoint(stem, ck);
  {
    std::ofstream out(stem + ".json");
    out << "{ not json";
  }
  EXPECT_THROW(load_checkpoint(stem), CheckpointError);
  EXPECT_THROW(load_checkpoint((dir_ / "missing").string()), CheckpointError);
}

TEST_F(CheckpointTest, FilesAreByteStable) {
  const PolicyNetwork net(tiny_dims());
  Checkpoint ck;
  ck.morphology = "planar-ref";
  ck.dims = tiny_dims();
  ck.params = net.initial_params<float>(4);
  auto read = [](const std::string& f) {
    std::ifstream in(f, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  save_checkpoint((dir_ / "a").string(), ck);
  save_checkpoint((dir_ / "b").string(), ck);
  EXPECT_EQ(read((dir_ / "a.bin").string()), read((dir_ / "b.bin").string()));
  std::string ja = read((dir_ / "a.json").string()), jb = read((dir_ / "b.json").string());
  // Only the payload file name differs.
  ja.replace(ja.find("a.bin"), 5, "b.bin");
  EXPECT_EQ(ja, jb);
}

}  // namespace
}  // namespace wheelleg
