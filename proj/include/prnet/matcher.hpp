// Actor-critic closest point: keypoint detection, Gumbel-Softmax
// correspondence sampling with straight-through gradients, temperature
// control, and the differentiable Procrustes head.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "prnet/networks.hpp"
#include "prnet/procrustes.hpp"
#include "prnet/registration.hpp"

namespace prnet {

struct KeypointStrategy {
  enum class Kind { kL2Norm, kRandom, kCentrality };
  Kind kind = Kind::kL2Norm;
  std::size_t k = 48;

  void validate() const {
    if (k < 3) throw ConfigError("KeypointStrategy: k must be >= 3");
  }
};

inline std::string keypoint_kind_name(KeypointStrategy::Kind k) {
  switch (k) {
    case KeypointStrategy::Kind::kL2Norm: return "l2norm";
    case KeypointStrategy::Kind::kRandom: return "random";
    case KeypointStrategy::Kind::kCentrality: return "centrality";
  }
  return "unknown";
}

inline KeypointStrategy::Kind parse_keypoint_kind(const std::string& s) {
  if (s == "l2norm") return KeypointStrategy::Kind::kL2Norm;
  if (s == "random") return KeypointStrategy::Kind::kRandom;
  if (s == "centrality") return KeypointStrategy::Kind::kCentrality;
  throw ConfigError("unknown keypoint strategy '" + s + "' (l2norm|random|centrality)");
}

struct TemperatureMode {
  enum class Kind { kFixed, kAnnealed, kLearnedGlobal, kPredicted };
  Kind kind = Kind::kPredicted;
  double fixed = 1.0;
  double anneal_start = 1.0;
  double anneal_end = 0.05;

  void validate() const {
    if (kind == Kind::kFixed && !(fixed > 0.0))
      throw NonPositiveTemperature("TemperatureMode: fixed temperature must be > 0");
    if (kind == Kind::kAnnealed && !(anneal_start > 0.0 && anneal_end > 0.0))
      throw NonPositiveTemperature("TemperatureMode: annealing endpoints must be > 0");
  }

  /// Log-linear interpolation from anneal_start (first epoch) to anneal_end
  /// (last epoch).
  [[nodiscard]] double annealed_at(std::size_t epoch, std::size_t epochs) const {
    if (epochs <= 1) return anneal_start;
    const double f = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(epochs - 1));
    return anneal_start * std::pow(anneal_end / anneal_start, f);
  }
};

/// "fixed:<v>", "annealed[:<start>:<end>]", "learned", or "predicted".
inline std::string temperature_mode_name(const TemperatureMode& m) {
  switch (m.kind) {
    case TemperatureMode::Kind::kFixed: return "fixed:" + std::to_string(m.fixed);
    case TemperatureMode::Kind::kAnnealed:
      return "annealed:" + std::to_string(m.anneal_start) + ":" + std::to_string(m.anneal_end);
    case TemperatureMode::Kind::kLearnedGlobal: return "learned";
    case TemperatureMode::Kind::kPredicted: return "predicted";
  }
  return "unknown";
}

inline TemperatureMode parse_temperature_mode(const std::string& s) {
  TemperatureMode m;
  auto parse_num = [&](const std::string& v) {
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) throw ConfigError("bad number '" + v + "' in temperature mode '" + s + "'");
    return x;
  };
  if (s == "predicted") {
    m.kind = TemperatureMode::Kind::kPredicted;
  } else if (s == "learned") {
    m.kind = TemperatureMode::Kind::kLearnedGlobal;
  } else if (s.rfind("fixed:", 0) == 0) {
    m.kind = TemperatureMode::Kind::kFixed;
    m.fixed = parse_num(s.substr(6));
  } else if (s == "annealed") {
    m.kind = TemperatureMode::Kind::kAnnealed;
  } else if (s.rfind("annealed:", 0) == 0) {
    m.kind = TemperatureMode::Kind::kAnnealed;
    const std::string rest = s.substr(9);
    const auto colon = rest.find(':');
    if (colon == std::string::npos) throw ConfigError("annealed mode needs start:end, got '" + s + "'");
    m.anneal_start = parse_num(rest.substr(0, colon));
    m.anneal_end = parse_num(rest.substr(colon + 1));
  } else {
    throw ConfigError("unknown temperature mode '" + s + "' (fixed:<v>|annealed[:a:b]|learned|predicted)");
  }
  m.validate();
  return m;
}

/// Which smooth function the straight-through backward differentiates.
enum class StBackward { kRelaxed, kPlainSoftmax };

inline std::string st_backward_name(StBackward b) {
  return b == StBackward::kRelaxed ? "relaxed" : "plain_softmax";
}

inline StBackward parse_st_backward(const std::string& s) {
  if (s == "relaxed") return StBackward::kRelaxed;
  if (s == "plain_softmax") return StBackward::kPlainSoftmax;
  throw ConfigError("unknown st_backward '" + s + "' (relaxed|plain_softmax)");
}

/// Indices of k rows of `phi`. Selection is on values only.
inline std::vector<std::size_t> detect_keypoints(const Tensor& phi, const KeypointStrategy& strategy,
                                                 Rng& rng) {
  if (phi.rank() != 2) throw ad::ShapeMismatch("detect_keypoints: needs (N x d)");
  const std::size_t n = phi.dim(0), d = phi.dim(1);
  const std::size_t k = strategy.k;
  if (k > n)
    throw KTooLarge("detect_keypoints: k=" + std::to_string(k) + " exceeds " + std::to_string(n) + " rows");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const double* x = phi.data().data();
  auto by_score = [&](const std::vector<double>& score, bool largest) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return largest ? score[a] > score[b] : score[a] < score[b];
    });
    idx.resize(k);
    return idx;
  };
  switch (strategy.kind) {
    case KeypointStrategy::Kind::kL2Norm: {
      std::vector<double> norm(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < d; ++c) norm[i] += x[i * d + c] * x[i * d + c];
        norm[i] = std::sqrt(norm[i]);
      }
      return by_score(norm, true);
    }
    case KeypointStrategy::Kind::kCentrality: {
      std::vector<double> mean_dist(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double d2 = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double diff = x[i * d + c] - x[j * d + c];
            d2 += diff * diff;
          }
          mean_dist[i] += std::sqrt(d2) / static_cast<double>(n);
        }
      return by_score(mean_dist, false);
    }
    case KeypointStrategy::Kind::kRandom: {
      for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
      idx.resize(k);
      return idx;
    }
  }
  return idx;
}

/// -log(-log(u)) with u clamped to [1e-12, 1 - 1e-12].
inline double gumbel_from_uniform(double u) {
  u = std::clamp(u, 1e-12, 1.0 - 1e-12);
  return -std::log(-std::log(u));
}

inline Tensor sample_gumbel(const ad::Shape& shape, Rng& rng) {
  std::vector<double> g(ad::numel_of(shape));
  for (auto& v : g) v = gumbel_from_uniform(rng.uniform());
  return {shape, std::move(g)};
}

/// Row i: softmax over targets of <phi_src_i, phi_tgt_j>.
inline Matching soft_match(const Tensor& phi_src, const Tensor& phi_tgt) {
  if (phi_src.rank() != 2 || phi_tgt.rank() != 2 || phi_src.dim(1) != phi_tgt.dim(1))
    throw ad::ShapeMismatch("soft_match: embeddings must be (k x d) with equal d");
  if (phi_src.dim(0) == 0 || phi_tgt.dim(0) == 0) throw EmptyInput("soft_match: empty embeddings");
  ad::NoGradGuard no_grad;
  const Tensor w = ad::softmax_lastdim(ad::matmul(phi_src, ad::transpose_last2(phi_tgt)));
  Eigen::MatrixXd m(static_cast<Eigen::Index>(w.dim(0)), static_cast<Eigen::Index>(w.dim(1)));
  for (std::size_t i = 0; i < w.dim(0); ++i)
    for (std::size_t j = 0; j < w.dim(1); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = w.at(i, j);
  return Matching::soft(std::move(m));
}

struct GumbelMatchOptions {
  StBackward backward = StBackward::kRelaxed;
  /// Replace the one-hot forward by the surrogate itself (for checking the
  /// straight-through backward against finite differences).
  bool surrogate_forward = false;
};

struct GumbelMatch {
  /// k x k: one-hot forward values, surrogate backward.
  Tensor weights;
  /// The smooth surrogate (values and graph).
  Tensor surrogate;
  Matching hard;
};

/// Per row, one-hot at argmax(logits + noise) (ties by lowest index); the
/// backward differentiates softmax((logits + noise) / lambda), or
/// softmax(logits) under kPlainSoftmax.
inline GumbelMatch gumbel_match(const Tensor& phi_src, const Tensor& phi_tgt, const Tensor& lambda,
                                const Tensor& noise, const GumbelMatchOptions& opt = {}) {
  if (phi_src.rank() != 2 || phi_tgt.rank() != 2 || phi_src.dim(1) != phi_tgt.dim(1))
    throw ad::ShapeMismatch("gumbel_match: embeddings must be (k x d) with equal d");
  const std::size_t rows = phi_src.dim(0), cols = phi_tgt.dim(0);
  if (noise.shape() != ad::Shape{rows, cols})
    throw ad::ShapeMismatch("gumbel_match: noise shape " + ad::shape_str(noise.shape()) +
                            " does not match logits");
  if (lambda.numel() != 1) throw ad::ShapeMismatch("gumbel_match: lambda must be scalar");
  if (!(lambda.item() > 0.0)) throw NonPositiveTemperature("gumbel_match: lambda must be > 0");
  const Tensor logits = ad::matmul(phi_src, ad::transpose_last2(phi_tgt));
  const Tensor perturbed = ad::add(logits, noise);
  Tensor soft = opt.backward == StBackward::kRelaxed
                    ? ad::softmax_lastdim(ad::divide(perturbed, ad::reshape(lambda, {})))
                    : ad::softmax_lastdim(logits);
  std::vector<std::size_t> targets(rows, 0);
  std::vector<double> one_hot(rows * cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < cols; ++j)
      if (perturbed.at(i, j) > perturbed.at(i, best)) best = j;
    targets[i] = best;
    one_hot[i * cols + best] = 1.0;
  }
  Tensor weights = opt.surrogate_forward ? soft
                                         : ad::straight_through(Tensor({rows, cols}, std::move(one_hot)), soft);
  return {std::move(weights), std::move(soft), Matching::hard(std::move(targets), cols)};
}

/// Per-iteration embeddings shared by both matching directions.
struct PairEmbedding {
  Tensor phi_x, phi_y;
  Tensor psi_x, psi_y;
};

inline PairEmbedding embed_pair(const PointCloud& source, const PointCloud& target,
                                const ModelParams& params) {
  const Tensor f_x = encode(source, params);
  const Tensor f_y = encode(target, params);
  auto [phi_x, phi_y] = cocontext(f_x, f_y, params);
  Tensor psi_x = global_pool(phi_x);
  Tensor psi_y = global_pool(phi_y);
  return {std::move(phi_x), std::move(phi_y), std::move(psi_x), std::move(psi_y)};
}

/// Scalar temperature for matching source -> target. `epoch`/`epochs` drive
/// the annealed schedule.
inline Tensor temperature(const TemperatureMode& mode, const Tensor& psi_src, const Tensor& psi_tgt,
                          const ModelParams& params, std::size_t epoch = 0, std::size_t epochs = 1) {
  switch (mode.kind) {
    case TemperatureMode::Kind::kFixed: return Tensor::scalar(mode.fixed);
    case TemperatureMode::Kind::kAnnealed: return Tensor::scalar(mode.annealed_at(epoch, epochs));
    case TemperatureMode::Kind::kLearnedGlobal: return global_temperature(params);
    case TemperatureMode::Kind::kPredicted: return value_head(psi_src, psi_tgt, params);
  }
  return Tensor::scalar(1.0);
}

struct AcpOptions {
  GumbelMatchOptions match;
  /// Draw Gumbel noise; when false the noise is zero (pure argmax).
  bool sample_noise = true;
  std::size_t epoch = 0;
  std::size_t epochs = 1;
  /// Keypoint-row matching to use instead of the sampled one.
  std::optional<std::vector<std::size_t>> forced_matches;
};

/// Differentiable rigid transform and its diagnostics.
struct AcpOutput {
  Tensor rotation;     // 3 x 3
  Tensor translation;  // 3
  RigidTransform transform;
  AcpDiagnostics diagnostics;
  Tensor lambda;
};

inline Tensor keypoint_coordinates(const PointCloud& cloud, const std::vector<std::size_t>& idx) {
  std::vector<double> data;
  data.reserve(idx.size() * 3);
  for (auto i : idx) data.insert(data.end(), {cloud[i][0], cloud[i][1], cloud[i][2]});
  return {{idx.size(), 3}, std::move(data)};
}

/// Procrustes from source keypoints to the weighted target keypoints:
/// H = Xc^T (W Y), R = rotation_from_covariance(H), t = mean(W Y) - R xbar.
inline std::pair<Tensor, Tensor> soft_procrustes(const Tensor& src_pts, const Tensor& tgt_pts,
                                                 const Tensor& weights) {
  const std::size_t k = src_pts.dim(0);
  Vec3 xbar = Vec3::Zero();
  for (std::size_t i = 0; i < k; ++i) xbar += Vec3(src_pts.at(i, 0), src_pts.at(i, 1), src_pts.at(i, 2));
  xbar /= static_cast<double>(k);
  std::vector<double> xct(3 * k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t c = 0; c < 3; ++c) xct[c * k + i] = src_pts.at(i, c) - xbar[static_cast<int>(c)];
  const Tensor mapped = ad::matmul(weights, tgt_pts);
  const Tensor h = ad::matmul(Tensor({3, k}, std::move(xct)), mapped);
  const Tensor r = ad::rotation_from_covariance(h);
  const Tensor ybar = ad::mean_rows(mapped);
  const Tensor xbar_row({1, 3}, {xbar[0], xbar[1], xbar[2]});
  const Tensor t = ad::reshape(ad::sub(ybar, ad::matmul(xbar_row, ad::transpose_last2(r))), {3});
  return {r, t};
}

inline RigidTransform transform_values(const Tensor& r, const Tensor& t) {
  RigidTransform out;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) out.rotation(i, j) = r.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    out.translation[i] = t[static_cast<std::size_t>(i)];
  }
  return out;
}

/// Keypoints -> Gumbel matching -> Procrustes for one direction, given the
/// pair's embeddings and the temperature.
inline AcpOutput acp_head(const PointCloud& source, const PointCloud& target, const Tensor& phi_src,
                          const Tensor& phi_tgt, const Tensor& lambda, const KeypointStrategy& strategy,
                          Rng rng, const AcpOptions& opt = {}) {
  strategy.validate();
  if (phi_src.dim(0) != source.size() || phi_tgt.dim(0) != target.size())
    throw ad::ShapeMismatch("acp_head: embeddings do not match clouds");
  Rng key_rng = rng.split(0);
  Rng noise_rng = rng.split(1);
  AcpOutput out;
  auto& diag = out.diagnostics;
  diag.source_keypoints = detect_keypoints(phi_src, strategy, key_rng);
  diag.target_keypoints = detect_keypoints(phi_tgt, strategy, key_rng);
  const std::size_t k = strategy.k;
  const Tensor ks = ad::gather_rows(phi_src, diag.source_keypoints);
  const Tensor kt = ad::gather_rows(phi_tgt, diag.target_keypoints);
  const Tensor noise = opt.sample_noise ? sample_gumbel({k, k}, noise_rng) : Tensor::zeros({k, k});
  GumbelMatch gm = gumbel_match(ks, kt, lambda, noise, opt.match);
  Tensor weights = gm.weights;
  if (opt.forced_matches) {
    if (opt.forced_matches->size() != k) throw DimensionMismatch("acp_head: forced matching size != k");
    gm.hard = Matching::hard(*opt.forced_matches, k);
    std::vector<double> one_hot(k * k, 0.0);
    for (std::size_t i = 0; i < k; ++i) one_hot.at(i * k + gm.hard.hard_targets[i]) = 1.0;
    weights = ad::straight_through(Tensor({k, k}, std::move(one_hot)), gm.surrogate);
  }
  diag.matches = gm.hard.hard_targets;

  const Tensor src_pts = keypoint_coordinates(source, diag.source_keypoints);
  const Tensor tgt_pts = keypoint_coordinates(target, diag.target_keypoints);
  std::tie(out.rotation, out.translation) = soft_procrustes(src_pts, tgt_pts, weights);
  out.transform = transform_values(out.rotation, out.translation);
  out.lambda = lambda;

  diag.lambda = lambda.item();
  double entropy = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double p = gm.surrogate.at(i, j);
      if (p > 0.0) entropy -= p * std::log(p);
    }
  diag.mean_entropy = entropy / static_cast<double>(k);
  PointCloud src_kp, tgt_kp;
  for (auto i : diag.source_keypoints) src_kp.points.push_back(source[i]);
  for (auto j : diag.target_keypoints) tgt_kp.points.push_back(target[j]);
  diag.objective = alignment_objective(src_kp, tgt_kp, out.transform, gm.hard);
  diag.degenerate = rank_deficient(svd3(cross_covariance(src_kp, mapped_targets(gm.hard, tgt_kp))).s);
  return out;
}

struct AcpStep {
  AcpOutput output;
  PairEmbedding embedding;
};

/// One ACP iteration X -> Y: Siamese encoding, co-context, pooling,
/// temperature, keypoints, Gumbel matching and Procrustes.
inline AcpStep acp_step(const PointCloud& source, const PointCloud& target, const ModelParams& params,
                        const KeypointStrategy& strategy, const TemperatureMode& temp_mode, Rng rng,
                        const AcpOptions& opt = {}) {
  temp_mode.validate();
  if (source.size() < strategy.k || target.size() < strategy.k)
    throw KTooLarge("acp_step: clouds smaller than keypoint count " + std::to_string(strategy.k));
  AcpStep step;
  step.embedding = embed_pair(source, target, params);
  const Tensor lambda = temperature(temp_mode, step.embedding.psi_x, step.embedding.psi_y, params,
                                    opt.epoch, opt.epochs);
  step.output = acp_head(source, target, step.embedding.phi_x, step.embedding.phi_y, lambda, strategy,
                         rng, opt);
  step.output.diagnostics.temperature_mode = temperature_mode_name(temp_mode);
  return step;
}

}  // namespace prnet
