#include "wheelleg/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include <Eigen/QR>
#include <nlohmann/json.hpp>

namespace wheelleg {
namespace {

template <class T>
using ConstMap = Eigen::Map<const Matrix<T>>;
template <class T>
using MutMap = Eigen::Map<Matrix<T>>;

template <class T>
ConstMap<T> view(const ParamLayout& layout, std::span<const T> params, int index) {
  const TensorInfo& t = layout.at(index);
  return ConstMap<T>(params.data() + t.offset, t.rows, t.cols);
}

template <class T>
MutMap<T> view(const ParamLayout& layout, std::span<T> params, int index) {
  const TensorInfo& t = layout.at(index);
  return MutMap<T>(params.data() + t.offset, t.rows, t.cols);
}

template <class T>
void elu_inplace(Matrix<T>& x) {
  x = x.unaryExpr([](T v) { return v > T(0) ? v : std::expm1(v); });
}

template <class T>
Matrix<T> elu_grad(const Matrix<T>& pre) {
  return pre.unaryExpr([](T v) { return v > T(0) ? T(1) : std::exp(v); });
}

void check_cols(const char* what, Eigen::Index got, int want) {
  if (got != want) {
    throw DimensionError(std::string(what) + " has " + std::to_string(got) + " columns, expected " +
                         std::to_string(want));
  }
}

}  // namespace

int ParamLayout::add(std::string name, int rows, int cols) {
  TensorInfo t{std::move(name), rows, cols, total_};
  total_ += t.size();
  tensors_.push_back(std::move(t));
  return static_cast<int>(tensors_.size()) - 1;
}

const TensorInfo& ParamLayout::find(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw ArgumentError("no tensor named '" + name + "'");
}

Mlp::Mlp(ParamLayout& layout, const std::string& prefix, int in, const std::vector<int>& hidden, int out)
    : in_(in), out_(out) {
  int prev = in;
  std::vector<int> widths = hidden;
  widths.push_back(out);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string base = prefix + ".l" + std::to_string(i);
    weights_.push_back(layout.add(base + ".weight", widths[i], prev));
    biases_.push_back(layout.add(base + ".bias", 1, widths[i]));
    prev = widths[i];
  }
}

template <class T>
Matrix<T> Mlp::forward(const ParamLayout& layout, std::span<const T> params, const Matrix<T>& x, Cache<T>* cache) const {
  check_cols("network input", x.cols(), in_);
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix<T> h = x;
  const int n = num_layers();
  for (int i = 0; i < n; ++i) {
    const auto W = view(layout, params, weights_[static_cast<std::size_t>(i)]);
    const auto b = view(layout, params, biases_[static_cast<std::size_t>(i)]);
    Matrix<T> z = h * W.transpose();
    z.rowwise() += b.row(0);
    if (cache) cache->inputs.push_back(std::move(h));
    if (i + 1 < n) {
      if (cache) cache->pre.push_back(z);
      elu_inplace(z);
    }
    h = std::move(z);
  }
  return h;
}

template <class T>
Matrix<T> Mlp::backward(const ParamLayout& layout, std::span<const T> params, const Cache<T>& cache,
                        const Matrix<T>& dy, std::span<T> grad) const {
  const int n = num_layers();
  if (static_cast<int>(cache.inputs.size()) != n) throw ArgumentError("backward needs a forward cache");
  check_cols("output gradient", dy.cols(), out_);
  Matrix<T> d = dy;
  for (int i = n - 1; i >= 0; --i) {
    const auto ui = static_cast<std::size_t>(i);
    if (i + 1 < n) d = d.cwiseProduct(elu_grad(cache.pre[ui]));
    view(layout, grad, weights_[ui]).noalias() += d.transpose() * cache.inputs[ui];
    view(layout, grad, biases_[ui]).row(0) += d.colwise().sum();
    if (i > 0) {
      d = d * view(layout, params, weights_[ui]);
    } else {
      return d * view(layout, params, weights_[ui]);
    }
  }
  return d;
}

template <class T>
void Mlp::initialize(const ParamLayout& layout, std::span<T> params, Rng& rng, double output_gain) const {
  const int n = num_layers();
  for (int i = 0; i < n; ++i) {
    auto W = view(layout, params, weights_[static_cast<std::size_t>(i)]);
    const Eigen::Index r = W.rows();
    const Eigen::Index c = W.cols();
    const Eigen::Index big = std::max(r, c);
    const Eigen::Index small = std::min(r, c);
    Eigen::MatrixXd a(big, small);
    for (Eigen::Index k = 0; k < a.size(); ++k) a.data()[k] = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
    const Eigen::MatrixXd rr = qr.matrixQR().topRows(small).template triangularView<Eigen::Upper>();
    for (Eigen::Index k = 0; k < small; ++k) {
      if (rr(k, k) < 0.0) q.col(k) *= -1.0;
    }
    const double gain = i + 1 < n ? std::numbers::sqrt2 : output_gain;
    if (r >= c) {
      W = (gain * q).cast<T>();
    } else {
      W = (gain * q.transpose()).cast<T>();
    }
    view(layout, params, biases_[static_cast<std::size_t>(i)]).setZero();
  }
}

PolicyNetwork::PolicyNetwork(NetworkDims dims) : dims_(std::move(dims)) {
  if (dims_.obs_dim < 1 || dims_.act_dim < 1 || dims_.history < 1 || dims_.latent < 0 || dims_.privileged_dim < 0) {
    throw ArgumentError("network dimensions must be positive");
  }
  encoder_ = Mlp(layout_, "encoder", dims_.history * dims_.obs_dim, dims_.prpn_hidden, kVelocityDim + dims_.latent);
  actor_ = Mlp(layout_, "actor", dims_.obs_dim + kVelocityDim + dims_.latent, dims_.actor_hidden, dims_.act_dim);
  log_std_ = layout_.add("actor.log_std", 1, dims_.act_dim);
  critic_ = Mlp(layout_, "critic", dims_.obs_dim + dims_.privileged_dim, dims_.critic_hidden, 1);
}

std::pair<std::size_t, std::size_t> PolicyNetwork::encoder_range() const {
  return {0, layout_.at(actor_.weight(0)).offset};
}

std::pair<std::size_t, std::size_t> PolicyNetwork::actor_range() const {
  return {layout_.at(actor_.weight(0)).offset, layout_.at(critic_.weight(0)).offset};
}

std::pair<std::size_t, std::size_t> PolicyNetwork::critic_range() const {
  return {layout_.at(critic_.weight(0)).offset, layout_.total()};
}

template <class T>
std::vector<T> PolicyNetwork::initial_params(std::uint64_t seed) const {
  std::vector<T> p(layout_.total(), T(0));
  Rng rng(seed, 0x6e6e);
  encoder_.initialize<T>(layout_, p, rng, 0.01);
  actor_.initialize<T>(layout_, p, rng, 0.01);
  critic_.initialize<T>(layout_, p, rng, 0.01);
  const TensorInfo& ls = log_std_info();
  std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(ls.offset), ls.size(), static_cast<T>(dims_.log_std_init));
  clamp_log_std<T>(p);
  return p;
}

template <class T>
PolicyNetwork::EncoderOut<T> PolicyNetwork::encode(std::span<const T> params, const Matrix<T>& histories,
                                                   bool keep_cache) const {
  EncoderOut<T> out;
  const Matrix<T> raw = encoder_.forward<T>(layout_, params, histories, keep_cache ? &out.cache : nullptr);
  out.velocity = raw.leftCols(kVelocityDim);
  out.latent = raw.rightCols(dims_.latent).array().tanh().matrix();
  return out;
}

template <class T>
Matrix<T> PolicyNetwork::actor_input(const Matrix<T>& obs, const Matrix<T>& velocity, const Matrix<T>& latent) const {
  check_cols("observation batch", obs.cols(), dims_.obs_dim);
  if (velocity.rows() != obs.rows() || latent.rows() != obs.rows()) throw DimensionError("actor input row mismatch");
  Matrix<T> in(obs.rows(), actor_.in_dim());
  in << obs, velocity, latent;
  return in;
}

template <class T>
Matrix<T> PolicyNetwork::actor_mean(std::span<const T> params, const Matrix<T>& actor_in,
                                    typename Mlp::Cache<T>* cache) const {
  return actor_.forward<T>(layout_, params, actor_in, cache);
}

template <class T>
Matrix<T> PolicyNetwork::critic_input(const Matrix<T>& obs, const Matrix<T>& privileged) const {
  check_cols("observation batch", obs.cols(), dims_.obs_dim);
  check_cols("privileged batch", privileged.cols(), dims_.privileged_dim);
  if (privileged.rows() != obs.rows()) throw DimensionError("critic input row mismatch");
  Matrix<T> in(obs.rows(), critic_.in_dim());
  in << obs, privileged;
  return in;
}

template <class T>
Matrix<T> PolicyNetwork::value(std::span<const T> params, const Matrix<T>& critic_in,
                               typename Mlp::Cache<T>* cache) const {
  return critic_.forward<T>(layout_, params, critic_in, cache);
}

template <class T>
void PolicyNetwork::clamp_log_std(std::span<T> params) const {
  const TensorInfo& t = log_std_info();
  for (std::size_t i = 0; i < t.size(); ++i) {
    T& v = params[t.offset + i];
    v = std::clamp(v, static_cast<T>(kLogStdMin), static_cast<T>(kLogStdMax));
  }
}

template <class T>
T gaussian_log_prob(std::span<const T> mean, std::span<const T> log_std, std::span<const T> x) {
  const T half_log_two_pi = static_cast<T>(0.5 * std::log(2.0 * std::numbers::pi));
  T lp = 0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const T u = (x[i] - mean[i]) * std::exp(-log_std[i]);
    lp -= T(0.5) * u * u + log_std[i] + half_log_two_pi;
  }
  return lp;
}

template <class T>
T gaussian_entropy(std::span<const T> log_std) {
  const T c = static_cast<T>(0.5 * (1.0 + std::log(2.0 * std::numbers::pi)));
  T h = 0;
  for (T s : log_std) h += s + c;
  return h;
}

FlatParams flatten(const PolicyNetwork& net, std::span<const float> params) {
  if (params.size() != net.num_params()) {
    throw DimensionError("parameter vector has " + std::to_string(params.size()) + " entries, expected " +
                         std::to_string(net.num_params()));
  }
  return {net.layout(), std::vector<float>(params.begin(), params.end())};
}

std::vector<float> unflatten(const PolicyNetwork& net, const FlatParams& flat) {
  if (flat.values.size() != flat.layout.total()) {
    throw CheckpointError("flat vector has " + std::to_string(flat.values.size()) + " values, manifest expects " +
                          std::to_string(flat.layout.total()));
  }
  if (!(flat.layout == net.layout())) throw CheckpointError("manifest layer table does not match the network");
  return flat.values;
}

// ---- checkpoint files ----

namespace {

using nlohmann::json;

json dims_to_json(const NetworkDims& d) {
  return {{"obs_dim", d.obs_dim},         {"privileged_dim", d.privileged_dim}, {"act_dim", d.act_dim},
          {"history", d.history},         {"latent", d.latent},                 {"prpn_hidden", d.prpn_hidden},
          {"actor_hidden", d.actor_hidden}, {"critic_hidden", d.critic_hidden}, {"log_std_init", d.log_std_init}};
}

NetworkDims dims_from_json(const json& j) {
  NetworkDims d;
  d.obs_dim = j.at("obs_dim").get<int>();
  d.privileged_dim = j.at("privileged_dim").get<int>();
  d.act_dim = j.at("act_dim").get<int>();
  d.history = j.at("history").get<int>();
  d.latent = j.at("latent").get<int>();
  d.prpn_hidden = j.at("prpn_hidden").get<std::vector<int>>();
  d.actor_hidden = j.at("actor_hidden").get<std::vector<int>>();
  d.critic_hidden = j.at("critic_hidden").get<std::vector<int>>();
  d.log_std_init = j.at("log_std_init").get<double>();
  return d;
}

std::string strip_stem(const std::string& path) {
  const std::filesystem::path p(path);
  if (p.extension() == ".json" || p.extension() == ".bin") return (p.parent_path() / p.stem()).string();
  return path;
}

std::uint32_t swap_bytes(std::uint32_t x) {
  return (x >> 24) | ((x >> 8) & 0xff00U) | ((x << 8) & 0xff0000U) | (x << 24);
}

void write_floats(std::ostream& out, std::span<const float> v) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  } else {
    for (float f : v) {
      const auto bits = swap_bytes(std::bit_cast<std::uint32_t>(f));
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
}

std::vector<float> read_floats(const char* data, std::size_t count) {
  std::vector<float> v(count);
  std::memcpy(v.data(), data, count * sizeof(float));
  if constexpr (std::endian::native != std::endian::little) {
    for (float& f : v) f = std::bit_cast<float>(swap_bytes(std::bit_cast<std::uint32_t>(f)));
  }
  return v;
}

void write_atomically(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void save_checkpoint(const std::string& stem_in, const Checkpoint& ck) {
  const std::string stem = strip_stem(stem_in);
  const PolicyNetwork net(ck.dims);
  if (ck.params.size() != net.num_params()) throw DimensionError("checkpoint params do not match the network dims");
  const bool has_adam = !ck.adam_m.empty();
  if (has_adam && (ck.adam_m.size() != ck.params.size() || ck.adam_v.size() != ck.params.size())) {
    throw DimensionError("optimizer moments do not match the parameter count");
  }

  json layers = json::array();
  for (const TensorInfo& t : net.layout().tensors()) {
    layers.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", t.offset}});
  }
  json norm = json::object();
  for (const auto& [k, v] : ck.normalization) norm[k] = v;
  const std::size_t n = ck.params.size();
  json m = {
      {"format_version", kCheckpointFormat},
      {"morphology", ck.morphology},
      {"dims", dims_to_json(ck.dims)},
      {"history", ck.dims.history},
      {"latent", ck.dims.latent},
      {"layers", layers},
      {"normalization", norm},
      {"payload",
       {{"file", std::filesystem::path(stem + ".bin").filename().string()},
        {"dtype", "float32-le"},
        {"params", n},
        {"adam_moments", has_adam ? n : 0}}},
      {"adam_step", ck.adam_step},
      {"learning_rate", ck.learning_rate},
      {"iteration", ck.iteration},
      {"rng_state", ck.rng_state},
      {"config", ck.config_json.empty() ? json(nullptr) : json::parse(ck.config_json)},
  };

  std::ostringstream bin;
  write_floats(bin, ck.params);
  if (has_adam) {
    write_floats(bin, ck.adam_m);
    write_floats(bin, ck.adam_v);
  }
  write_atomically(stem + ".bin", bin.str());
  write_atomically(stem + ".json", m.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string stem = strip_stem(path);
  json m;
  {
    std::ifstream in(stem + ".json");
    if (!in) throw CheckpointError("cannot open manifest " + stem + ".json");
    m = json::parse(in, nullptr, false);
    if (m.is_discarded()) throw CheckpointError("manifest " + stem + ".json is not valid JSON");
  }
  Checkpoint ck;
  try {
    if (m.at("format_version").get<int>() != kCheckpointFormat) {
      throw CheckpointError("unsupported checkpoint format version " + m.at("format_version").dump());
    }
    ck.morphology = m.at("morphology").get<std::string>();
    ck.dims = dims_from_json(m.at("dims"));
    ck.adam_step = m.at("adam_step").get<std::int64_t>();
    ck.learning_rate = m.at("learning_rate").get<double>();
    ck.iteration = m.at("iteration").get<std::int64_t>();
    ck.rng_state = m.at("rng_state").get<std::string>();
    for (const auto& [k, v] : m.at("normalization").items()) ck.normalization.emplace_back(k, v.get<double>());
    if (!m.at("config").is_null()) ck.config_json = m.at("config").dump();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("manifest is missing a field: ") + e.what());
  }

  const PolicyNetwork net(ck.dims);
  ParamLayout table;
  try {
    for (const auto& l : m.at("layers")) {
      table.add(l.at("name").get<std::string>(), l.at("shape").at(0).get<int>(), l.at("shape").at(1).get<int>());
      if (table.tensors().back().offset != l.at("offset").get<std::size_t>()) {
        throw CheckpointError("layer '" + table.tensors().back().name + "' has an inconsistent offset");
      }
    }
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed layer table: ") + e.what());
  }

  const auto n = m.at("payload").at("params").get<std::size_t>();
  const auto moments = m.at("payload").at("adam_moments").get<std::size_t>();
  std::string bytes;
  {
    std::ifstream in(stem + ".bin", std::ios::binary);
    if (!in) throw CheckpointError("cannot open payload " + stem + ".bin");
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  const std::size_t expected = (n + 2 * moments) * sizeof(float);
  if (bytes.size() != expected) {
    throw CheckpointError("payload has " + std::to_string(bytes.size()) + " bytes, manifest expects " +
                          std::to_string(expected));
  }
  FlatParams flat{table, read_floats(bytes.data(), n)};
  ck.params = unflatten(net, flat);
  if (moments > 0) {
    if (moments != n) throw CheckpointError("optimizer moment count does not match the parameter count");
    ck.adam_m = read_floats(bytes.data() + n * sizeof(float), n);
    ck.adam_v = read_floats(bytes.data() + 2 * n * sizeof(float), n);
  }
  for (float f : ck.params) {
    if (!std::isfinite(f)) throw CheckpointError("payload contains non-finite parameters");
  }
  return ck;
}

#define WHEELLEG_NN_INSTANTIATE(T)                                                                             \
  template Matrix<T> Mlp::forward<T>(const ParamLayout&, std::span<const T>, const Matrix<T>&, Cache<T>*) const; \
  template Matrix<T> Mlp::backward<T>(const ParamLayout&, std::span<const T>, const Cache<T>&, const Matrix<T>&, \
                                      std::span<T>) const;                                                     \
  template void Mlp::initialize<T>(const ParamLayout&, std::span<T>, Rng&, double) const;                      \
  template std::vector<T> PolicyNetwork::initial_params<T>(std::uint64_t) const;                               \
  template PolicyNetwork::EncoderOut<T> PolicyNetwork::encode<T>(std::span<const T>, const Matrix<T>&, bool) const; \
  template Matrix<T> PolicyNetwork::actor_input<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&) const; \
  template Matrix<T> PolicyNetwork::actor_mean<T>(std::span<const T>, const Matrix<T>&, Mlp::Cache<T>*) const; \
  template Matrix<T> PolicyNetwork::critic_input<T>(const Matrix<T>&, const Matrix<T>&) const;                 \
  template Matrix<T> PolicyNetwork::value<T>(std::span<const T>, const Matrix<T>&, Mlp::Cache<T>*) const;      \
  template void PolicyNetwork::clamp_log_std<T>(std::span<T>) const;                                           \
  template T gaussian_log_prob<T>(std::span<const T>, std::span<const T>, std::span<const T>);                 \
  template T gaussian_entropy<T>(std::span<const T>);

WHEELLEG_NN_INSTANTIATE(float)
WHEELLEG_NN_INSTANTIATE(double)

#undef WHEELLEG_NN_INSTANTIATE

}  // namespace wheelleg
