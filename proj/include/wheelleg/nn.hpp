#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "wheelleg/rng.hpp"
#include "wheelleg/types.hpp"

namespace wheelleg {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One named tensor inside a flat parameter vector. Row-major.
/// Flat parameter storage. The allocation is aligned to Eigen's widest packet
/// so every tensor view sits at the same alignment in every instance, which
/// keeps vectorized reductions bit-reproducible.
using ParamVector = std::vector<float, Eigen::aligned_allocator<float>>;

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;

  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  bool operator==(const TensorInfo&) const = default;
};

/// Ordered tensor table; parameters and gradients share it.
class ParamLayout {
 public:
  int add(std::string name, int rows, int cols);
  [[nodiscard]] const std::vector<TensorInfo>& tensors() const { return tensors_; }
  [[nodiscard]] const TensorInfo& at(int index) const { return tensors_.at(static_cast<std::size_t>(index)); }
  [[nodiscard]] const TensorInfo& find(const std::string& name) const;
  [[nodiscard]] std::size_t total() const { return total_; }
  bool operator==(const ParamLayout&) const = default;

 private:
  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

/// Dense stack: ELU on hidden layers, linear output.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamLayout& layout, const std::string& prefix, int in, const std::vector<int>& hidden, int out);

  template <class T>
  struct Cache {
    std::vector<Matrix<T>> inputs;  // input to each layer
    std::vector<Matrix<T>> pre;     // pre-activation of each hidden layer
  };

  [[nodiscard]] int in_dim() const { return in_; }
  [[nodiscard]] int out_dim() const { return out_; }
  [[nodiscard]] int num_layers() const { return static_cast<int>(weights_.size()); }
  /// Layout indices of layer i's weight (out x in) and bias (1 x out).
  [[nodiscard]] int weight(int i) const { return weights_[static_cast<std::size_t>(i)]; }
  [[nodiscard]] int bias(int i) const { return biases_[static_cast<std::size_t>(i)]; }

  template <class T>
  Matrix<T> forward(const ParamLayout& layout, std::span<const T> params, const Matrix<T>& x,
                    Cache<T>* cache = nullptr) const;

  /// Accumulates parameter gradients into `grad` and returns dL/dx.
  template <class T>
  Matrix<T> backward(const ParamLayout& layout, std::span<const T> params, const Cache<T>& cache,
                     const Matrix<T>& dy, std::span<T> grad) const;

  /// Orthogonal weights (gain sqrt(2) hidden, `output_gain` last), zero biases.
  template <class T>
  void initialize(const ParamLayout& layout, std::span<T> params, Rng& rng, double output_gain) const;

 private:
  int in_ = 0;
  int out_ = 0;
  std::vector<int> weights_;
  std::vector<int> biases_;
};

struct NetworkDims {
  int obs_dim = 0;
  int privileged_dim = 0;
  int act_dim = 0;
  int history = 20;
  int latent = 16;
  std::vector<int> prpn_hidden{256, 128};
  std::vector<int> actor_hidden{512, 256, 128};
  std::vector<int> critic_hidden{512, 256, 128};
  double log_std_init = -0.5;

  bool operator==(const NetworkDims&) const = default;
};

inline constexpr double kLogStdMin = -4.0;
inline constexpr double kLogStdMax = 1.0;
inline constexpr int kVelocityDim = 3;

/// History encoder, actor and critic over one flat parameter vector.
/// Encoder output is [v_hat (3), z (latent, tanh)]; the actor sees
/// [obs, v_hat, z]; the critic sees [obs, privileged].
class PolicyNetwork {
 public:
  explicit PolicyNetwork(NetworkDims dims);

  [[nodiscard]] const NetworkDims& dims() const { return dims_; }
  [[nodiscard]] const ParamLayout& layout() const { return layout_; }
  [[nodiscard]] std::size_t num_params() const { return layout_.total(); }
  [[nodiscard]] const Mlp& encoder() const { return encoder_; }
  [[nodiscard]] const Mlp& actor() const { return actor_; }
  [[nodiscard]] const Mlp& critic() const { return critic_; }
  [[nodiscard]] const TensorInfo& log_std_info() const { return layout_.at(log_std_); }

  /// Parameter ranges owned by each head, as [begin, end) offsets.
  [[nodiscard]] std::pair<std::size_t, std::size_t> encoder_range() const;
  [[nodiscard]] std::pair<std::size_t, std::size_t> actor_range() const;  // includes log-std
  [[nodiscard]] std::pair<std::size_t, std::size_t> critic_range() const;

  template <class T>
  std::vector<T> initial_params(std::uint64_t seed) const;

  template <class T>
  struct EncoderOut {
    Matrix<T> velocity;  // B x 3
    Matrix<T> latent;    // B x L, in [-1, 1]
    typename Mlp::Cache<T> cache;
  };

  template <class T>
  EncoderOut<T> encode(std::span<const T> params, const Matrix<T>& histories, bool keep_cache = false) const;

  template <class T>
  Matrix<T> actor_input(const Matrix<T>& obs, const Matrix<T>& velocity, const Matrix<T>& latent) const;

  template <class T>
  Matrix<T> actor_mean(std::span<const T> params, const Matrix<T>& actor_in,
                       typename Mlp::Cache<T>* cache = nullptr) const;

  template <class T>
  Matrix<T> critic_input(const Matrix<T>& obs, const Matrix<T>& privileged) const;

  /// Value per row (B x 1).
  template <class T>
  Matrix<T> value(std::span<const T> params, const Matrix<T>& critic_in, typename Mlp::Cache<T>* cache = nullptr) const;

  template <class T>
  std::span<const T> log_std(std::span<const T> params) const {
    const TensorInfo& t = log_std_info();
    return params.subspan(t.offset, t.size());
  }

  /// Projects log-std entries back into [kLogStdMin, kLogStdMax].
  template <class T>
  void clamp_log_std(std::span<T> params) const;

 private:
  NetworkDims dims_;
  ParamLayout layout_;
  Mlp encoder_;
  Mlp actor_;
  Mlp critic_;
  int log_std_ = 0;
};

/// Diagonal Gaussian helpers; each row of `mean` is one distribution.
template <class T>
T gaussian_log_prob(std::span<const T> mean, std::span<const T> log_std, std::span<const T> x);
template <class T>
T gaussian_entropy(std::span<const T> log_std);

/// Flat vector plus the layout that gives it shape.
struct FlatParams {
  ParamLayout layout;
  std::vector<float> values;
};

FlatParams flatten(const PolicyNetwork& net, std::span<const float> params);
/// Checks the vector against the layout; throws CheckpointError on mismatch.
std::vector<float> unflatten(const PolicyNetwork& net, const FlatParams& flat);

struct Checkpoint {
  std::string morphology;
  NetworkDims dims;
  std::vector<float> params;
  /// Optimizer and run state, stored verbatim in the manifest.
  std::vector<float> adam_m;
  std::vector<float> adam_v;
  std::int64_t adam_step = 0;
  double learning_rate = 0.0;
  std::int64_t iteration = 0;
  std::string rng_state;
  /// Fixed observation scales the policy was trained with.
  std::vector<std::pair<std::string, double>> normalization;
  std::string config_json;
};

inline constexpr int kCheckpointFormat = 1;

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian float32
/// payload: params, then Adam first and second moments).
void save_checkpoint(const std::string& stem, const Checkpoint& ck);
/// `path` may be the stem, the .json or the .bin file. Throws CheckpointError.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace wheelleg
