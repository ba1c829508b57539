// Learned feature stack: dynamic-graph EdgeConv encoder, a one-block
// Transformer co-context module, global pooling, and the temperature head.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "prnet/autodiff.hpp"
#include "prnet/geometry.hpp"
#include "prnet/rng.hpp"

namespace prnet {

using ad::Tensor;

struct EncoderConfig {
  std::vector<std::size_t> layer_widths{16, 16, 32};
  std::size_t knn_k = 8;
  std::size_t embed_dim = 64;
  double leaky_slope = 0.2;
  /// Per-edge channel normalization inside each EdgeConv MLP.
  bool normalize = true;

  void validate() const {
    if (layer_widths.empty()) throw ConfigError("EncoderConfig: layer_widths must be non-empty");
    if (knn_k < 1) throw ConfigError("EncoderConfig: knn_k must be >= 1");
    if (embed_dim < 1) throw ConfigError("EncoderConfig: embed_dim must be >= 1");
  }
};

struct CoContextConfig {
  std::size_t heads = 4;
  std::size_t ff_dim = 128;

  void validate(std::size_t model_dim) const {
    if (heads == 0 || model_dim % heads != 0)
      throw ConfigError("CoContextConfig: model_dim must be divisible by heads");
    if (ff_dim == 0) throw ConfigError("CoContextConfig: ff_dim must be >= 1");
  }
};

struct ValueHeadConfig {
  std::vector<std::size_t> widths{32, 32, 32, 1};
  double lambda_floor = 0.01;
  /// Temperature produced when the head's last pre-activation is at its
  /// initial value.
  double initial_lambda = 8.0;

  void validate() const {
    if (widths.empty() || widths.back() != 1)
      throw ConfigError("ValueHeadConfig: last width must be 1");
    if (!(lambda_floor > 0.0)) throw ConfigError("ValueHeadConfig: lambda_floor must be > 0");
    if (!(initial_lambda > lambda_floor))
      throw ConfigError("ValueHeadConfig: initial_lambda must exceed lambda_floor");
  }
};

struct ModelConfig {
  EncoderConfig encoder;
  CoContextConfig cocontext;
  ValueHeadConfig value;

  void validate() const {
    encoder.validate();
    cocontext.validate(encoder.embed_dim);
    value.validate();
  }
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out
};

struct AttentionParams {
  std::vector<Linear> query, key, value;  // one per head, model_dim x head_dim
  Linear output;                          // model_dim x model_dim
};

struct FeedForwardParams {
  Linear hidden;
  Linear output;
};

struct EncoderParams {
  std::vector<Linear> edge;
  Linear project;
};

struct CoContextParams {
  AttentionParams enc_self;
  FeedForwardParams enc_ff;
  AttentionParams dec_self;
  AttentionParams dec_cross;
  FeedForwardParams dec_ff;
  /// Zero-initialized so that embeddings start as the encoder features.
  Linear output;
};

struct ModelParams {
  ModelConfig config;
  EncoderParams encoder;
  CoContextParams cocontext;
  std::vector<Linear> value_head;
  /// Pre-softplus global temperature for the learned-global mode.
  Tensor temperature_raw;

  /// Visits every parameter with a unique, stable name.
  template <typename F>
  void for_each(F&& f) {
    auto lin = [&](const std::string& name, Linear& l) {
      f(name + ".weight", l.weight);
      f(name + ".bias", l.bias);
    };
    auto attn = [&](const std::string& name, AttentionParams& a) {
      for (std::size_t h = 0; h < a.query.size(); ++h) {
        lin(name + ".q" + std::to_string(h), a.query[h]);
        lin(name + ".k" + std::to_string(h), a.key[h]);
        lin(name + ".v" + std::to_string(h), a.value[h]);
      }
      lin(name + ".out", a.output);
    };
    for (std::size_t l = 0; l < encoder.edge.size(); ++l)
      lin("encoder.edge" + std::to_string(l), encoder.edge[l]);
    lin("encoder.project", encoder.project);
    attn("cocontext.enc_self", cocontext.enc_self);
    lin("cocontext.enc_ff.hidden", cocontext.enc_ff.hidden);
    lin("cocontext.enc_ff.output", cocontext.enc_ff.output);
    attn("cocontext.dec_self", cocontext.dec_self);
    attn("cocontext.dec_cross", cocontext.dec_cross);
    lin("cocontext.dec_ff.hidden", cocontext.dec_ff.hidden);
    lin("cocontext.dec_ff.output", cocontext.dec_ff.output);
    lin("cocontext.output", cocontext.output);
    for (std::size_t l = 0; l < value_head.size(); ++l)
      lin("value.layer" + std::to_string(l), value_head[l]);
    f(std::string("temperature.raw"), temperature_raw);
  }

  template <typename F>
  void for_each(F&& f) const {
    const_cast<ModelParams*>(this)->for_each(
        [&](const std::string& name, Tensor& t) { f(name, static_cast<const Tensor&>(t)); });
  }

  [[nodiscard]] std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for_each([&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
    return out;
  }

  /// Deep copy with fresh tensor handles.
  [[nodiscard]] ModelParams clone() const {
    ModelParams copy = *this;
    copy.for_each([](const std::string&, Tensor& t) { t = t.clone(); });
    return copy;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
  }

  [[nodiscard]] bool all_finite() const {
    bool ok = true;
    for_each([&](const std::string&, const Tensor& t) {
      for (double v : t.values()) ok = ok && std::isfinite(v);
    });
    return ok;
  }
};

namespace detail {

inline Linear init_linear(std::size_t in, std::size_t out, Rng& rng, bool zero = false) {
  std::vector<double> w(in * out, 0.0);
  if (!zero) {
    const double a = std::sqrt(3.0 / static_cast<double>(in));
    for (auto& v : w) v = rng.uniform(-a, a);
  }
  return {Tensor::parameter({in, out}, std::move(w)), Tensor::parameter({out}, std::vector<double>(out, 0.0))};
}

inline AttentionParams init_attention(std::size_t dim, std::size_t heads, Rng& rng) {
  AttentionParams a;
  const std::size_t hd = dim / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    a.query.push_back(init_linear(dim, hd, rng));
    a.key.push_back(init_linear(dim, hd, rng));
    a.value.push_back(init_linear(dim, hd, rng));
  }
  a.output = init_linear(dim, dim, rng);
  return a;
}

inline double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

}  // namespace detail

inline ModelParams init_model(const ModelConfig& config, Rng rng) {
  config.validate();
  ModelParams p;
  p.config = config;
  std::size_t in = 3;
  std::size_t concat = 0;
  for (std::size_t w : config.encoder.layer_widths) {
    p.encoder.edge.push_back(detail::init_linear(2 * in, w, rng));
    in = w;
    concat += w;
  }
  const std::size_t d = config.encoder.embed_dim;
  p.encoder.project = detail::init_linear(concat, d, rng);
  const std::size_t heads = config.cocontext.heads;
  p.cocontext.enc_self = detail::init_attention(d, heads, rng);
  p.cocontext.enc_ff = {detail::init_linear(d, config.cocontext.ff_dim, rng),
                        detail::init_linear(config.cocontext.ff_dim, d, rng)};
  p.cocontext.dec_self = detail::init_attention(d, heads, rng);
  p.cocontext.dec_cross = detail::init_attention(d, heads, rng);
  p.cocontext.dec_ff = {detail::init_linear(d, config.cocontext.ff_dim, rng),
                        detail::init_linear(config.cocontext.ff_dim, d, rng)};
  p.cocontext.output = detail::init_linear(d, d, rng, /*zero=*/true);
  std::size_t vin = 2 * d;
  for (std::size_t i = 0; i < config.value.widths.size(); ++i) {
    const bool last = i + 1 == config.value.widths.size();
    p.value_head.push_back(detail::init_linear(vin, config.value.widths[i], rng, /*zero=*/last));
    vin = config.value.widths[i];
  }
  const double raw = detail::inverse_softplus(config.value.initial_lambda - config.value.lambda_floor);
  p.value_head.back().bias.data()[0] = raw;
  p.temperature_raw = Tensor::parameter({}, {raw});
  return p;
}

inline Tensor linear(const Tensor& x, const Linear& l) {
  return ad::broadcast_add_row(ad::matmul(x, l.weight), l.bias);
}

inline Tensor cloud_tensor(const PointCloud& cloud) {
  std::vector<double> data;
  data.reserve(cloud.size() * 3);
  for (const auto& p : cloud.points) data.insert(data.end(), {p[0], p[1], p[2]});
  return {{cloud.size(), 3}, std::move(data)};
}

/// Row-major (N x k) neighbour indices.
struct NeighborTable {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<std::size_t> index;

  [[nodiscard]] std::size_t at(std::size_t i, std::size_t j) const { return index[i * k + j]; }
};

/// k nearest rows (Euclidean) of each row, excluding itself; ties by lowest
/// index. Indices are constants for differentiation.
inline NeighborTable knn_graph(const Tensor& x, std::size_t k) {
  if (x.rank() != 2) throw ad::ShapeMismatch("knn_graph: needs (N x D)");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (k >= n) throw KTooLarge("knn_graph: k=" + std::to_string(k) + " needs more than " + std::to_string(n) + " rows");
  NeighborTable g{n, k, std::vector<std::size_t>(n * k)};
  std::vector<double> sq(n, 0.0);
  const double* X = x.data().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) sq[i] += X[i * d + c] * X[i * d + c];
  std::vector<std::pair<double, std::size_t>> cand(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t m = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double d2 = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = X[i * d + c] - X[j * d + c];
        d2 += diff * diff;
      }
      cand[m++] = {d2, j};
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k),
                      cand.begin() + static_cast<std::ptrdiff_t>(m));
    for (std::size_t j = 0; j < k; ++j) g.index[i * k + j] = cand[j].second;
  }
  return g;
}

struct EdgeConvOptions {
  bool normalize = true;
  double leaky_slope = 0.2;
};

/// Row i = max over neighbours j of act(norm(W [x_i, x_j - x_i] + b)).
inline Tensor edge_conv(const Tensor& features, const NeighborTable& graph, const Linear& layer,
                        const EdgeConvOptions& opt = {}) {
  if (features.rank() != 2 || graph.rows != features.dim(0))
    throw ad::ShapeMismatch("edge_conv: graph does not match features");
  const std::size_t n = graph.rows, k = graph.k;
  if (layer.weight.dim(0) != 2 * features.dim(1))
    throw ad::ShapeMismatch("edge_conv: weight expects input width " +
                            std::to_string(layer.weight.dim(0) / 2));
  std::vector<std::size_t> centre(n * k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) centre[i * k + j] = i;
  const Tensor xi = ad::gather_rows(features, centre);
  const Tensor xj = ad::gather_rows(features, graph.index);
  Tensor h = linear(ad::concat_lastdim({xi, ad::sub(xj, xi)}), layer);
  if (opt.normalize) h = ad::layer_norm_lastdim(h, 1e-5);
  h = ad::leaky_relu(h, opt.leaky_slope);
  const std::size_t out = layer.weight.dim(1);
  return ad::reduce_max_lastdim(ad::transpose_last2(ad::reshape(h, {n, k, out})));
}

/// Siamese DGCNN: EdgeConv layers each on a k-NN graph recomputed in the
/// previous layer's feature space, all layer outputs concatenated and
/// projected to embed_dim.
inline Tensor encode(const Tensor& points, const ModelParams& params) {
  const auto& cfg = params.config.encoder;
  if (points.rank() != 2 || points.dim(1) != 3) throw ad::ShapeMismatch("encode: needs (N x 3)");
  if (points.dim(0) <= cfg.knn_k)
    throw KTooLarge("encode: cloud of " + std::to_string(points.dim(0)) + " points with knn_k=" +
                    std::to_string(cfg.knn_k));
  std::vector<Tensor> outputs;
  Tensor x = points;
  for (const auto& layer : params.encoder.edge) {
    const NeighborTable graph = knn_graph(x, cfg.knn_k);
    x = edge_conv(x, graph, layer, {cfg.normalize, cfg.leaky_slope});
    outputs.push_back(x);
  }
  return linear(ad::concat_lastdim(outputs), params.encoder.project);
}

inline Tensor encode(const PointCloud& cloud, const ModelParams& params) {
  return encode(cloud_tensor(cloud), params);
}

/// Scaled dot-product attention per head, heads concatenated and projected.
/// When `weights_out` is given it receives each head's attention matrix.
inline Tensor multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                                   const AttentionParams& p,
                                   std::vector<Tensor>* weights_out = nullptr) {
  if (queries.rank() != 2 || keys.rank() != 2 || values.rank() != 2 ||
      keys.dim(0) != values.dim(0) || queries.dim(1) != keys.dim(1) ||
      keys.dim(1) != values.dim(1))
    throw ad::ShapeMismatch("multi_head_attention: incompatible operands");
  if (p.query.empty()) throw ad::ShapeMismatch("multi_head_attention: no heads");
  const std::size_t head_dim = p.query[0].weight.dim(1);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < p.query.size(); ++h) {
    const Tensor q = linear(queries, p.query[h]);
    const Tensor k = linear(keys, p.key[h]);
    const Tensor v = linear(values, p.value[h]);
    const Tensor attn =
        ad::softmax_lastdim(ad::scale(ad::matmul(q, ad::transpose_last2(k)), inv_scale));
    if (weights_out) weights_out->push_back(attn);
    heads.push_back(ad::matmul(attn, v));
  }
  return linear(ad::concat_lastdim(heads), p.output);
}

namespace detail {

inline Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  return linear(ad::relu(linear(x, p.hidden)), p.output);
}

inline Tensor transformer_encode(const Tensor& src, const CoContextParams& p) {
  const Tensor n0 = ad::layer_norm_lastdim(src);
  Tensor h = ad::add(src, multi_head_attention(n0, n0, n0, p.enc_self));
  h = ad::add(h, feed_forward(ad::layer_norm_lastdim(h), p.enc_ff));
  return ad::layer_norm_lastdim(h);
}

inline Tensor transformer_decode(const Tensor& tgt, const Tensor& memory, const CoContextParams& p) {
  const Tensor n0 = ad::layer_norm_lastdim(tgt);
  Tensor z = ad::add(tgt, multi_head_attention(n0, n0, n0, p.dec_self));
  const Tensor n1 = ad::layer_norm_lastdim(z);
  z = ad::add(z, multi_head_attention(n1, memory, memory, p.dec_cross));
  z = ad::add(z, feed_forward(ad::layer_norm_lastdim(z), p.dec_ff));
  return linear(ad::layer_norm_lastdim(z), p.output);
}

}  // namespace detail

struct CoContextOutput {
  Tensor phi_x;
  Tensor phi_y;
};

/// Phi_X = F_X + dec(F_X, enc(F_Y)) and symmetrically for Y, sharing one
/// encoder and one decoder block.
inline CoContextOutput cocontext(const Tensor& f_x, const Tensor& f_y, const ModelParams& params) {
  if (f_x.rank() != 2 || f_y.rank() != 2 || f_x.dim(1) != f_y.dim(1) ||
      f_x.dim(1) != params.config.encoder.embed_dim)
    throw ad::ShapeMismatch("cocontext: feature widths differ from embed_dim");
  const auto& p = params.cocontext;
  const Tensor mem_y = detail::transformer_encode(f_y, p);
  const Tensor mem_x = detail::transformer_encode(f_x, p);
  return {ad::add(f_x, detail::transformer_decode(f_x, mem_y, p)),
          ad::add(f_y, detail::transformer_decode(f_y, mem_x, p))};
}

/// Channel-wise mean over rows: (N x d) -> (d).
inline Tensor global_pool(const Tensor& phi) {
  if (phi.rank() != 2 || phi.dim(0) == 0) throw EmptyInput("global_pool: needs non-empty (N x d)");
  return ad::reshape(ad::mean_rows(phi), {phi.dim(1)});
}

/// lambda = softplus(MLP([Psi_X, Psi_Y])) + lambda_floor.
inline Tensor value_head(const Tensor& psi_x, const Tensor& psi_y, const ModelParams& params) {
  const std::size_t d = params.config.encoder.embed_dim;
  if (psi_x.numel() != d || psi_y.numel() != d)
    throw ad::ShapeMismatch("value_head: global features must have embed_dim entries");
  Tensor h = ad::reshape(ad::concat_lastdim({ad::reshape(psi_x, {d}), ad::reshape(psi_y, {d})}),
                         {1, 2 * d});
  for (std::size_t i = 0; i < params.value_head.size(); ++i) {
    h = linear(h, params.value_head[i]);
    if (i + 1 < params.value_head.size()) h = ad::relu(ad::layer_norm_lastdim(h));
  }
  return ad::add_constant(ad::softplus(ad::reshape(h, {})), params.config.value.lambda_floor);
}

/// softplus(raw) + lambda_floor for the single trainable temperature.
inline Tensor global_temperature(const ModelParams& params) {
  return ad::add_constant(ad::softplus(params.temperature_raw), params.config.value.lambda_floor);
}

}  // namespace prnet
