#include "wheelleg/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace wheelleg {
namespace {

template <class T>
Matrix<T> as_matrix(std::span<const float> data, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
    throw DimensionError("batch has " + std::to_string(data.size()) + " values, expected " +
                         std::to_string(rows * cols));
  }
  return Eigen::Map<const Matrix<float>>(data.data(), rows, cols).template cast<T>();
}

template <class T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace

void PpoConfig::validate() const {
  auto fail = [](const char* key, const std::string& why) { throw ConfigError(std::string("ppo.") + key, why); };
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma", "gamma must be in (0, 1]");
  if (!(lambda > 0.0 && lambda <= 1.0)) fail("lambda", "lambda must be in (0, 1]");
  if (!(clip > 0.0)) fail("clip", "clip must be positive");
  if (epochs < 1) fail("epochs", "epochs must be >= 1");
  if (minibatches < 1) fail("minibatches", "minibatches must be >= 1");
  if (!(max_grad_norm > 0.0)) fail("max_grad_norm", "max_grad_norm must be positive");
  if (!(lr_min > 0.0 && lr_min <= lr_max)) fail("lr_min", "need 0 < lr_min <= lr_max");
  if (!(learning_rate >= lr_min && learning_rate <= lr_max)) fail("learning_rate", "learning_rate outside [lr_min, lr_max]");
  if (!(kl_target > 0.0)) fail("kl_target", "kl_target must be positive");
}

GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                      std::span<const std::uint8_t> dones, std::span<const double> bootstrap, double gamma,
                      double lambda, int T, int N) {
  const auto n = static_cast<std::size_t>(T) * static_cast<std::size_t>(N);
  if (T < 1 || N < 1 || rewards.size() != n || values.size() != n || dones.size() != n ||
      bootstrap.size() != static_cast<std::size_t>(N)) {
    throw DimensionError("GAE inputs must be T x N with an N-entry bootstrap");
  }
  GaeResult r;
  r.advantages.assign(n, 0.0);
  r.returns.assign(n, 0.0);
  for (int e = 0; e < N; ++e) {
    double next_value = bootstrap[static_cast<std::size_t>(e)];
    double next_adv = 0.0;
    for (int t = T - 1; t >= 0; --t) {
      const std::size_t i = static_cast<std::size_t>(t) * static_cast<std::size_t>(N) + static_cast<std::size_t>(e);
      const double live = dones[i] ? 0.0 : 1.0;
      const double delta = rewards[i] + gamma * next_value * live - values[i];
      next_adv = delta + gamma * lambda * live * next_adv;
      r.advantages[i] = next_adv;
      r.returns[i] = next_adv + values[i];
      next_value = values[i];
    }
  }
  return r;
}

void normalize_advantages(std::span<double> a) {
  if (a.size() < 2) return;
  const double mean = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
  double var = 0.0;
  for (double x : a) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(a.size() - 1));
  for (double& x : a) x = (x - mean) / (sd + 1e-8);
}

template <class T>
LossStats ppo_loss(const PolicyNetwork& net, std::span<const T> params, const Minibatch<T>& mb, const PpoConfig& cfg,
                   std::span<T> grad) {
  const int B = mb.size();
  const int A = net.dims().act_dim;
  const int L = net.dims().latent;
  const int obs_dim = net.dims().obs_dim;
  if (B < 1) throw DimensionError("empty minibatch");
  if (mb.actions.rows() != B || mb.actions.cols() != A || mb.true_velocity.rows() != B ||
      static_cast<int>(mb.old_log_prob.size()) != B || static_cast<int>(mb.advantages.size()) != B ||
      static_cast<int>(mb.returns.size()) != B) {
    throw DimensionError("minibatch fields disagree on the batch size");
  }
  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != params.size()) throw DimensionError("gradient buffer size mismatch");

  auto enc = net.encode<T>(params, mb.histories, want_grad);
  const Matrix<T> actor_in = net.actor_input<T>(mb.obs, enc.velocity, enc.latent);
  typename Mlp::Cache<T> actor_cache;
  const Matrix<T> mean = net.actor_mean<T>(params, actor_in, want_grad ? &actor_cache : nullptr);
  const Matrix<T> critic_in = net.critic_input<T>(mb.obs, mb.privileged);
  typename Mlp::Cache<T> critic_cache;
  const Matrix<T> value = net.value<T>(params, critic_in, want_grad ? &critic_cache : nullptr);
  const std::span<const T> log_std = net.log_std<T>(params);

  const T inv_b = T(1) / static_cast<T>(B);
  const T lo = static_cast<T>(1.0 - cfg.clip);
  const T hi = static_cast<T>(1.0 + cfg.clip);
  Matrix<T> d_mean(B, A);
  std::vector<T> d_log_std(static_cast<std::size_t>(A), T(0));
  LossStats s;
  T policy = 0, kl = 0, clipped = 0;
  for (int i = 0; i < B; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    const T logp = gaussian_log_prob<T>({mean.row(i).data(), static_cast<std::size_t>(A)}, log_std,
                                        {mb.actions.row(i).data(), static_cast<std::size_t>(A)});
    const T ratio = std::exp(logp - mb.old_log_prob[ui]);
    const T adv = mb.advantages[ui];
    const T surr1 = ratio * adv;
    const T surr2 = std::clamp(ratio, lo, hi) * adv;
    policy -= std::min(surr1, surr2) * inv_b;
    kl += (mb.old_log_prob[ui] - logp) * inv_b;
    if (ratio < lo || ratio > hi) clipped += inv_b;
    // d(policy)/d(logp); zero where the clipped branch is the active minimum.
    const T dlogp = surr1 <= surr2 ? -ratio * adv * inv_b : T(0);
    for (int j = 0; j < A; ++j) {
      const auto uj = static_cast<std::size_t>(j);
      const T inv_sigma = std::exp(-log_std[uj]);
      const T u = (mb.actions(i, j) - mean(i, j)) * inv_sigma;
      d_mean(i, j) = dlogp * u * inv_sigma;
      d_log_std[uj] += dlogp * (u * u - T(1));
    }
  }
  const T entropy = gaussian_entropy<T>(log_std);

  T value_loss = 0;
  Matrix<T> d_value(B, 1);
  for (int i = 0; i < B; ++i) {
    const T err = mb.returns[static_cast<std::size_t>(i)] - value(i, 0);
    value_loss += err * err * inv_b;
    d_value(i, 0) = static_cast<T>(cfg.value_coef) * T(-2) * err * inv_b;
  }

  const Matrix<T> vel_err = enc.velocity - mb.true_velocity;
  const T aux_scale = T(1) / static_cast<T>(B * kVelocityDim);
  const T aux = vel_err.squaredNorm() * aux_scale;

  s.policy = static_cast<double>(policy);
  s.value = static_cast<double>(value_loss);
  s.entropy = static_cast<double>(entropy);
  s.aux = static_cast<double>(aux);
  s.approx_kl = static_cast<double>(kl);
  s.clip_fraction = static_cast<double>(clipped);
  s.total = s.policy + cfg.value_coef * s.value - cfg.entropy_coef * s.entropy + cfg.aux_coef * s.aux;
  if (!want_grad) return s;

  std::fill(grad.begin(), grad.end(), T(0));
  const Matrix<T> d_actor_in = net.actor().backward<T>(net.layout(), params, actor_cache, d_mean, grad);
  const TensorInfo& ls = net.log_std_info();
  for (int j = 0; j < A; ++j) {
    grad[ls.offset + static_cast<std::size_t>(j)] = d_log_std[static_cast<std::size_t>(j)] - static_cast<T>(cfg.entropy_coef);
  }
  net.critic().backward<T>(net.layout(), params, critic_cache, d_value, grad);

  Matrix<T> d_enc(B, kVelocityDim + L);
  d_enc.leftCols(kVelocityDim) = static_cast<T>(cfg.aux_coef) * T(2) * aux_scale * vel_err;
  if (!cfg.stop_velocity_gradient) d_enc.leftCols(kVelocityDim) += d_actor_in.middleCols(obs_dim, kVelocityDim);
  d_enc.rightCols(L) = d_actor_in.rightCols(L).cwiseProduct(
      (T(1) - enc.latent.array().square()).matrix());
  net.encoder().backward<T>(net.layout(), params, enc.cache, d_enc, grad);
  return s;
}

template LossStats ppo_loss<float>(const PolicyNetwork&, std::span<const float>, const Minibatch<float>&,
                                   const PpoConfig&, std::span<float>);
template LossStats ppo_loss<double>(const PolicyNetwork&, std::span<const double>, const Minibatch<double>&,
                                    const PpoConfig&, std::span<double>);

Adam::Adam(std::size_t n, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0f), v_(n, 0.0f) {}

void Adam::step(std::span<float> params, std::span<const float> grad, double lr) {
  if (params.size() != m_.size() || grad.size() != m_.size()) throw DimensionError("optimizer size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto b1 = static_cast<float>(beta1_);
  const auto b2 = static_cast<float>(beta2_);
  const auto step = static_cast<float>(lr / c1);
  const auto inv_c2 = static_cast<float>(1.0 / c2);
  const auto eps = static_cast<float>(eps_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const float g = grad[i];
    m_[i] = b1 * m_[i] + (1.0f - b1) * g;
    v_[i] = b2 * v_[i] + (1.0f - b2) * g * g;
    params[i] -= step * m_[i] / (std::sqrt(v_[i] * inv_c2) + eps);
  }
}

void Adam::restore(std::vector<float> m, std::vector<float> v, std::int64_t t) {
  if (m.size() != m_.size() || v.size() != v_.size()) throw CheckpointError("optimizer state has the wrong size");
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

RolloutBuffer::RolloutBuffer(int T_, int N_, const NetworkDims& d)
    : T(T_), N(N_), obs_dim(d.obs_dim), history_dim(d.history * d.obs_dim), privileged_dim(d.privileged_dim),
      act_dim(d.act_dim) {
  const auto n = static_cast<std::size_t>(T) * static_cast<std::size_t>(N);
  histories.assign(n * static_cast<std::size_t>(history_dim), 0.0f);
  obs.assign(n * static_cast<std::size_t>(obs_dim), 0.0f);
  privileged.assign(n * static_cast<std::size_t>(privileged_dim), 0.0f);
  actions.assign(n * static_cast<std::size_t>(act_dim), 0.0f);
  true_velocity.assign(n * kVelocityDim, 0.0f);
  log_probs.assign(n, 0.0f);
  values.assign(n, 0.0);
  rewards.assign(n, 0.0);
  dones.assign(n, 0);
  bootstrap.assign(static_cast<std::size_t>(N), 0.0);
}

PpoLearner::PpoLearner(NetworkDims dims, PpoConfig cfg, std::uint64_t seed)
    : net_(std::move(dims)), cfg_(cfg), adam_(0), lr_(cfg.learning_rate), rng_(seed, 0x70706f) {
  cfg_.validate();
  const std::vector<float> init = net_.initial_params<float>(seed);
  params_.assign(init.begin(), init.end());
  adam_ = Adam(params_.size());
}

ActOutput PpoLearner::act(std::span<const float> histories, std::span<const float> obs,
                          std::span<const float> privileged, bool deterministic) {
  const NetworkDims& d = net_.dims();
  const auto n = static_cast<Eigen::Index>(obs.size() / static_cast<std::size_t>(d.obs_dim));
  const Matrix<float> h = as_matrix<float>(histories, n, d.history * d.obs_dim);
  const Matrix<float> o = as_matrix<float>(obs, n, d.obs_dim);
  const auto enc = net_.encode<float>(params_, h);
  const Matrix<float> mean = net_.actor_mean<float>(params_, net_.actor_input<float>(o, enc.velocity, enc.latent));
  const std::span<const float> log_std = net_.log_std<float>(params_);

  ActOutput out;
  out.mean.assign(mean.data(), mean.data() + mean.size());
  out.velocity.assign(enc.velocity.data(), enc.velocity.data() + enc.velocity.size());
  out.actions = out.mean;
  out.log_probs.resize(static_cast<std::size_t>(n));
  const auto A = static_cast<std::size_t>(d.act_dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    float* a = out.actions.data() + static_cast<std::size_t>(i) * A;
    if (!deterministic) {
      for (std::size_t j = 0; j < A; ++j) a[j] += std::exp(log_std[j]) * static_cast<float>(rng_.normal());
    }
    out.log_probs[static_cast<std::size_t>(i)] =
        gaussian_log_prob<float>({out.mean.data() + static_cast<std::size_t>(i) * A, A}, log_std, {a, A});
  }
  if (!privileged.empty() || d.privileged_dim == 0) out.values = values(obs, privileged);
  return out;
}

std::vector<float> PpoLearner::values(std::span<const float> obs, std::span<const float> privileged) const {
  const NetworkDims& d = net_.dims();
  const auto n = static_cast<Eigen::Index>(obs.size() / static_cast<std::size_t>(d.obs_dim));
  const Matrix<float> v = net_.value<float>(
      params_, net_.critic_input<float>(as_matrix<float>(obs, n, d.obs_dim),
                                        as_matrix<float>(privileged, n, d.privileged_dim)));
  return {v.data(), v.data() + v.size()};
}

UpdateStats PpoLearner::update(const RolloutBuffer& buf) {
  const int total = buf.T * buf.N;
  GaeResult gae = compute_gae(buf.rewards, buf.values, buf.dones, buf.bootstrap, cfg_.gamma, cfg_.lambda, buf.T, buf.N);
  normalize_advantages(gae.advantages);

  const int nmb = std::min(cfg_.minibatches, total);
  const int mb_size = total / nmb;
  std::vector<int> order(static_cast<std::size_t>(total));
  ParamVector grad(params_.size());
  UpdateStats st;
  int used = 0;

  auto gather = [&](std::span<const int> idx) {
    const auto B = static_cast<Eigen::Index>(idx.size());
    Minibatch<float> mb;
    auto rows = [&](const std::vector<float>& src, int width, Matrix<float>& dst) {
      dst.resize(B, width);
      for (Eigen::Index r = 0; r < B; ++r) {
        std::copy_n(src.data() + static_cast<std::size_t>(idx[static_cast<std::size_t>(r)]) * static_cast<std::size_t>(width),
                    width, dst.row(r).data());
      }
    };
    rows(buf.histories, buf.history_dim, mb.histories);
    rows(buf.obs, buf.obs_dim, mb.obs);
    rows(buf.privileged, buf.privileged_dim, mb.privileged);
    rows(buf.actions, buf.act_dim, mb.actions);
    rows(buf.true_velocity, kVelocityDim, mb.true_velocity);
    for (int k : idx) {
      const auto uk = static_cast<std::size_t>(k);
      mb.old_log_prob.push_back(buf.log_probs[uk]);
      mb.advantages.push_back(static_cast<float>(gae.advantages[uk]));
      mb.returns.push_back(static_cast<float>(gae.returns[uk]));
    }
    return mb;
  };

  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng_.index(i + 1)]);
    for (int b = 0; b < nmb; ++b) {
      const std::span<const int> idx(order.data() + static_cast<std::size_t>(b) * static_cast<std::size_t>(mb_size),
                                     static_cast<std::size_t>(mb_size));
      const Minibatch<float> mb = gather(idx);
      const LossStats ls = ppo_loss<float>(net_, params_, mb, cfg_, grad);
      ++st.minibatches;
      if (!std::isfinite(ls.total) || !all_finite<float>(grad)) {
        if (st.skipped++ == 0) {
          std::ostringstream os;
          os << "epoch " << epoch << " minibatch " << b << ": policy " << ls.policy << " value " << ls.value
             << " entropy " << ls.entropy << " aux " << ls.aux << " kl " << ls.approx_kl;
          st.skipped_report = os.str();
        }
        continue;
      }
      double norm = 0.0;
      for (float g : grad) norm += static_cast<double>(g) * g;
      norm = std::sqrt(norm);
      if (norm > cfg_.max_grad_norm) {
        const auto scale = static_cast<float>(cfg_.max_grad_norm / (norm + 1e-6));
        for (float& g : grad) g *= scale;
      }
      if (cfg_.adaptive_lr) {
        if (ls.approx_kl > 2.0 * cfg_.kl_target) {
          lr_ /= 1.5;
        } else if (ls.approx_kl < 0.5 * cfg_.kl_target) {
          lr_ *= 1.5;
        }
        lr_ = std::clamp(lr_, cfg_.lr_min, cfg_.lr_max);
      }
      adam_.step(params_, grad, lr_);
      net_.clamp_log_std<float>(params_);

      ++used;
      st.policy_loss += ls.policy;
      st.value_loss += ls.value;
      st.entropy += ls.entropy;
      st.aux_loss += ls.aux;
      st.approx_kl += ls.approx_kl;
      st.clip_fraction += ls.clip_fraction;
      st.grad_norm += norm;
    }
  }
  if (used > 0) {
    const double inv = 1.0 / used;
    st.policy_loss *= inv;
    st.value_loss *= inv;
    st.entropy *= inv;
    st.aux_loss *= inv;
    st.approx_kl *= inv;
    st.clip_fraction *= inv;
    st.grad_norm *= inv;
  }
  st.learning_rate = lr_;
  return st;
}

Checkpoint PpoLearner::checkpoint(const std::string& morphology, std::int64_t iteration) const {
  Checkpoint ck;
  ck.morphology = morphology;
  ck.dims = net_.dims();
  ck.params.assign(params_.begin(), params_.end());
  ck.adam_m = adam_.first_moment();
  ck.adam_v = adam_.second_moment();
  ck.adam_step = adam_.steps();
  ck.learning_rate = lr_;
  ck.iteration = iteration;
  ck.rng_state = rng_.state();
  return ck;
}

void PpoLearner::restore(const Checkpoint& ck) {
  if (!(ck.dims == net_.dims())) throw MorphologyMismatch("checkpoint network dims do not match this learner");
  params_.assign(ck.params.begin(), ck.params.end());
  if (!ck.adam_m.empty()) adam_.restore(ck.adam_m, ck.adam_v, ck.adam_step);
  if (ck.learning_rate > 0.0) lr_ = ck.learning_rate;
  if (!ck.rng_state.empty()) rng_.set_state(ck.rng_state);
}

}  // namespace wheelleg
