#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "wheelleg/nn.hpp"
#include "wheelleg/rng.hpp"

namespace wheelleg {

struct PpoConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double clip = 0.2;
  int epochs = 5;
  int minibatches = 4;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  double aux_coef = 1.0;
  double max_grad_norm = 1.0;
  double kl_target = 0.01;
  double learning_rate = 3e-4;
  double lr_min = 1e-5;
  double lr_max = 1e-2;
  bool adaptive_lr = true;
  /// Block actor-loss gradients from reaching the velocity head.
  bool stop_velocity_gradient = true;

  /// Throws ConfigError naming the first bad field.
  void validate() const;
};

struct GaeResult {
  std::vector<double> advantages;  // raw, T x N
  std::vector<double> returns;     // advantages + values
};

/// All arrays are T x N, row t holding step t of every env.
GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                      std::span<const std::uint8_t> dones, std::span<const double> bootstrap, double gamma,
                      double lambda, int T, int N);

/// In place: zero mean, unit std (eps 1e-8). No-op for fewer than 2 entries.
void normalize_advantages(std::span<double> a);

template <class T>
struct Minibatch {
  Matrix<T> histories;   // B x (H * obs)
  Matrix<T> obs;         // B x obs
  Matrix<T> privileged;  // B x priv
  Matrix<T> actions;     // B x act
  Matrix<T> true_velocity;  // B x 3
  std::vector<T> old_log_prob;
  std::vector<T> advantages;
  std::vector<T> returns;

  [[nodiscard]] int size() const { return static_cast<int>(obs.rows()); }
};

struct LossStats {
  double total = 0.0;
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double aux = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
};

/// Loss terms of one minibatch. When `grad` is non-empty it receives the
/// gradient of the total loss (it is overwritten, not accumulated).
template <class T>
LossStats ppo_loss(const PolicyNetwork& net, std::span<const T> params, const Minibatch<T>& mb,
                   const PpoConfig& cfg, std::span<T> grad = {});

/// Adam: m <- b1 m + (1 - b1) g, v <- b2 v + (1 - b2) g^2,
/// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) with bias-corrected
/// m_hat = m / (1 - b1^t), v_hat = v / (1 - b2^t).
class Adam {
 public:
  explicit Adam(std::size_t n = 0, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(std::span<float> params, std::span<const float> grad, double lr);

  [[nodiscard]] const std::vector<float>& first_moment() const { return m_; }
  [[nodiscard]] const std::vector<float>& second_moment() const { return v_; }
  [[nodiscard]] std::int64_t steps() const { return t_; }
  void restore(std::vector<float> m, std::vector<float> v, std::int64_t t);

 private:
  double beta1_, beta2_, eps_;
  std::vector<float> m_, v_;
  std::int64_t t_ = 0;
};

/// Fixed-horizon on-policy storage, step-major (index t * N + e).
struct RolloutBuffer {
  int T = 0;
  int N = 0;
  int obs_dim = 0;
  int history_dim = 0;
  int privileged_dim = 0;
  int act_dim = 0;
  std::vector<float> histories;
  std::vector<float> obs;
  std::vector<float> privileged;
  std::vector<float> actions;
  std::vector<float> true_velocity;
  std::vector<float> log_probs;
  std::vector<double> values;
  std::vector<double> rewards;
  std::vector<std::uint8_t> dones;
  std::vector<double> bootstrap;  // N values after the last step

  RolloutBuffer() = default;
  RolloutBuffer(int T, int N, const NetworkDims& dims);
};

struct ActOutput {
  std::vector<float> actions;  // N x act
  std::vector<float> mean;
  std::vector<float> log_probs;
  std::vector<float> values;
  std::vector<float> velocity;  // N x 3 encoder estimate
};

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double aux_loss = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
  int minibatches = 0;
  int skipped = 0;
  /// Statistics of the first skipped minibatch, empty when none was skipped.
  std::string skipped_report;
};

class PpoLearner {
 public:
  PpoLearner(NetworkDims dims, PpoConfig cfg, std::uint64_t seed);

  [[nodiscard]] const PolicyNetwork& network() const { return net_; }
  [[nodiscard]] const PpoConfig& config() const { return cfg_; }
  [[nodiscard]] std::span<const float> params() const { return params_; }
  [[nodiscard]] ParamVector& mutable_params() { return params_; }
  [[nodiscard]] double learning_rate() const { return lr_; }
  [[nodiscard]] const Adam& optimizer() const { return adam_; }
  [[nodiscard]] Rng& rng() { return rng_; }

  /// One forward pass over a batch of envs. Inputs are row-major batches.
  /// Deterministic mode returns the mean and skips sampling.
  ActOutput act(std::span<const float> histories, std::span<const float> obs, std::span<const float> privileged,
                bool deterministic);
  std::vector<float> values(std::span<const float> obs, std::span<const float> privileged) const;

  UpdateStats update(const RolloutBuffer& buffer);

  [[nodiscard]] Checkpoint checkpoint(const std::string& morphology, std::int64_t iteration) const;
  void restore(const Checkpoint& ck);

 private:
  PolicyNetwork net_;
  PpoConfig cfg_;
  ParamVector params_;
  Adam adam_;
  double lr_;
  Rng rng_;
};

}  // namespace wheelleg
