// The iterative registration loop, the discounted three-term loss, the
// trainer and the evaluation harness.
#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "prnet/checkpoint.hpp"
#include "prnet/config.hpp"
#include "prnet/icp.hpp"
#include "prnet/matcher.hpp"

namespace prnet {

namespace detail {

inline Tensor const_rotation(const Mat3& r) {
  std::vector<double> d(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) d[static_cast<std::size_t>(3 * i + j)] = r(i, j);
  return {{3, 3}, std::move(d)};
}

inline Tensor const_vector(const Vec3& v) { return {{3}, {v[0], v[1], v[2]}}; }

inline Tensor squared_norm(const Tensor& x) { return ad::reduce_sum(ad::mul(x, x)); }

}  // namespace detail

/// ||R^T R* - I||_F^2 + ||t - t*||^2 with (R, t) on the tape.
inline Tensor rigid_motion_loss(const Tensor& rotation, const Tensor& translation,
                                const RigidTransform& local_gt) {
  const Tensor rr = ad::matmul(ad::transpose_last2(rotation), detail::const_rotation(local_gt.rotation));
  return ad::add(detail::squared_norm(ad::sub(rr, Tensor::identity(3))),
                 detail::squared_norm(ad::sub(translation, detail::const_vector(local_gt.translation))));
}

inline Tensor rigid_motion_loss(const RigidTransform& pred, const RigidTransform& local_gt) {
  return rigid_motion_loss(detail::const_rotation(pred.rotation), detail::const_vector(pred.translation),
                           local_gt);
}

/// ||R_XY R_YX - I||_F^2 + ||t_XY - t_YX||^2, translation term as printed.
inline Tensor cycle_loss(const Tensor& r_xy, const Tensor& t_xy, const Tensor& r_yx, const Tensor& t_yx) {
  return ad::add(detail::squared_norm(ad::sub(ad::matmul(r_xy, r_yx), Tensor::identity(3))),
                 detail::squared_norm(ad::sub(t_xy, t_yx)));
}

inline Tensor cycle_loss(const RigidTransform& xy, const RigidTransform& yx) {
  return cycle_loss(detail::const_rotation(xy.rotation), detail::const_vector(xy.translation),
                    detail::const_rotation(yx.rotation), detail::const_vector(yx.translation));
}

/// ||Psi_X - Psi_Y|| (not squared); gradient 0 at coincidence.
inline Tensor feature_align_loss(const Tensor& psi_x, const Tensor& psi_y) {
  if (psi_x.shape() != psi_y.shape()) throw ad::ShapeMismatch("feature_align_loss: shapes differ");
  return ad::sqrt(detail::squared_norm(ad::sub(psi_x, psi_y)));
}

/// Sum over p of gamma^(p-1) * per_step[p-1].
inline double discounted_total(const std::vector<double>& per_step, double gamma) {
  double total = 0.0, w = 1.0;
  for (double l : per_step) {
    total += w * l;
    w *= gamma;
  }
  return total;
}

struct RegisterOptions {
  /// Replace one-hot matchings by their surrogate in the forward pass.
  bool surrogate_forward = false;
  /// Overrides TrainConfig::eval_noise / training's always-on sampling.
  std::optional<bool> sample_noise;
  std::size_t epoch = 0;
  std::size_t epochs = 1;
  /// Per-step accumulated transforms to use in place of the computed ones.
  /// The iteration state is cut from the graph, so this reproduces the
  /// exact function the backward pass differentiates.
  std::optional<std::vector<RigidTransform>> replay_accumulated;
  /// Per-step forced keypoint matching for the X -> Y head.
  std::optional<std::vector<std::vector<std::size_t>>> forced_matches;
};

struct LossTerms {
  double motion = 0.0;
  double cycle = 0.0;
  double feature = 0.0;
};

struct PrnetOutcome {
  RegistrationResult result;
  /// Discounted total loss (train mode only).
  std::optional<Tensor> loss;
  /// Undiscounted per-term sums over steps.
  LossTerms terms;
};

/// Runs P refinement iterations on `pair`. In train mode the Y -> X head,
/// the local ground truth and the discounted loss are also computed.
inline PrnetOutcome prnet_register(const RegistrationPair& pair, const ModelParams& params,
                                   const TrainConfig& config, Rng rng, bool train_mode,
                                   const RegisterOptions& opt = {}) {
  const auto start = std::chrono::steady_clock::now();
  config.keypoints.validate();
  config.temperature.validate();
  PrnetOutcome out;
  std::optional<ad::NoGradGuard> no_grad;
  if (!train_mode) no_grad.emplace();

  AcpOptions acp;
  acp.match.backward = config.st_backward;
  acp.match.surrogate_forward = opt.surrogate_forward;
  acp.sample_noise = opt.sample_noise.value_or(train_mode || config.eval_noise);
  acp.epoch = opt.epoch;
  acp.epochs = opt.epochs;

  RigidTransform acc;
  std::optional<Tensor> total;
  double weight = 1.0;
  for (std::size_t p = 0; p < config.iterations; ++p) {
    if (opt.replay_accumulated) acc = opt.replay_accumulated->at(p);
    const PointCloud moved = apply_transform(acc, pair.source);
    if (moved.size() < config.keypoints.k || pair.target.size() < config.keypoints.k)
      throw KTooLarge("prnet_register: clouds smaller than keypoint count " +
                      std::to_string(config.keypoints.k));
    const Rng step_rng = rng.split(p);
    const PairEmbedding emb = embed_pair(moved, pair.target, params);
    const Tensor lambda_xy =
        temperature(config.temperature, emb.psi_x, emb.psi_y, params, opt.epoch, opt.epochs);
    AcpOptions acp_xy = acp;
    if (opt.forced_matches) acp_xy.forced_matches = opt.forced_matches->at(p);
    AcpOutput xy = acp_head(moved, pair.target, emb.phi_x, emb.phi_y, lambda_xy, config.keypoints,
                            step_rng.split(0), acp_xy);
    xy.diagnostics.temperature_mode = temperature_mode_name(config.temperature);

    StepRecord rec;
    rec.transform = xy.transform;
    rec.objective = xy.diagnostics.objective;
    out.result.degenerate = out.result.degenerate || xy.diagnostics.degenerate;
    if (train_mode) {
      const RigidTransform local_gt = local_ground_truth(pair.ground_truth, acc);
      rec.accumulated_before = acc;
      rec.local_ground_truth = local_gt;
      Tensor lm = rigid_motion_loss(xy.rotation, xy.translation, local_gt);
      const Tensor lambda_yx =
          temperature(config.temperature, emb.psi_y, emb.psi_x, params, opt.epoch, opt.epochs);
      const AcpOutput yx = acp_head(pair.target, moved, emb.phi_y, emb.phi_x, lambda_yx, config.keypoints,
                                    step_rng.split(1), acp);
      if (config.symmetric_motion_loss)
        lm = ad::add(lm, rigid_motion_loss(yx.rotation, yx.translation, invert(local_gt)));
      const Tensor lc = cycle_loss(xy.rotation, xy.translation, yx.rotation, yx.translation);
      const Tensor lg = feature_align_loss(emb.psi_x, emb.psi_y);
      const Tensor lp = ad::add(lm, ad::add(ad::scale(lc, config.alpha), ad::scale(lg, config.beta)));
      out.terms.motion += lm.item();
      out.terms.cycle += lc.item();
      out.terms.feature += lg.item();
      rec.loss = lp.item();
      const Tensor weighted = ad::scale(lp, weight);
      total = total ? ad::add(*total, weighted) : weighted;
      weight *= config.gamma;
    }
    rec.acp = std::move(xy.diagnostics);
    out.result.per_step.push_back(std::move(rec));
    acc = compose(xy.transform, acc);
  }
  out.result.final_transform = acc;
  out.loss = total;
  out.result.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

/// First and second moments per parameter, in ModelParams::named() order.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// Gradients of a backward pass, flattened in ModelParams::named() order.
inline std::vector<std::vector<double>> flatten_gradients(const ModelParams& params,
                                                          const ad::GradientMap& grads) {
  std::vector<std::vector<double>> out;
  params.for_each([&](const std::string&, const Tensor& t) {
    const auto* g = grads.find(t);
    out.push_back(g ? *g : std::vector<double>(t.numel(), 0.0));
  });
  return out;
}

/// Learning rate for a 0-based epoch: lr divided by lr_drop_factor once for
/// each drop epoch already completed.
inline double learning_rate(const TrainConfig& config, std::size_t epoch) {
  double lr = config.lr;
  for (auto d : config.lr_drop_epochs)
    if (epoch >= d) lr /= config.lr_drop_factor;
  return lr;
}

/// Decoupled weight decay then one bias-corrected Adam update.
inline void adam_step(ModelParams& params, const std::vector<std::vector<double>>& grads, AdamState& state,
                      const TrainConfig& config, double lr) {
  std::size_t i = 0;
  if (state.m.empty()) {
    params.for_each([&](const std::string&, const Tensor& t) {
      state.m.emplace_back(t.numel(), 0.0);
      state.v.emplace_back(t.numel(), 0.0);
    });
  }
  ++state.step;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  params.for_each([&](const std::string& name, Tensor& t) {
    if (i >= grads.size() || grads[i].size() != t.numel())
      throw DimensionMismatch("adam_step: gradient for '" + name + "' misaligned");
    auto w = t.data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      w[k] -= lr * config.weight_decay * w[k];
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config.adam_eps);
    }
    ++i;
  });
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `threads` workers; fn(i) must only
/// touch slot i of any shared output.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i, w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::uint64_t derived_seed(const Rng& root, std::uint64_t a, std::uint64_t b) {
  Rng r = root.split(a).split(b);
  return r();
}

}  // namespace detail

struct TrainData {
  std::vector<PointCloud> shapes;
  PairSpec spec;
  /// Held-out pairs evaluated after every `eval_every` epochs.
  std::vector<RegistrationPair> eval_pairs;
  std::size_t eval_every = 1;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double mean_loss = 0.0;
  LossTerms mean_terms;
  std::optional<MetricsReport> eval;
};

inline json to_json(const EpochLog& e) {
  json j = {{"epoch", e.epoch},
            {"lr", e.lr},
            {"mean_loss", e.mean_loss},
            {"mean_motion_loss", e.mean_terms.motion},
            {"mean_cycle_loss", e.mean_terms.cycle},
            {"mean_feature_loss", e.mean_terms.feature}};
  if (e.eval) j["eval"] = to_json(*e.eval);
  return j;
}

struct TrainState {
  ModelParams params;
  AdamState adam;
  std::size_t epochs_completed = 0;
  std::vector<EpochLog> log;
};

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  /// Called after epochs that are multiples of checkpoint_every and after
  /// the last epoch.
  std::function<void(const TrainState&)> on_checkpoint;
  /// Called with every training registration (in deterministic order).
  std::function<void(const RegistrationPair&, const RegistrationResult&)> on_registration;
  /// Stop once this many epochs are completed (for resume testing).
  std::optional<std::size_t> stop_after;
};

/// Registration pairs of a 0-based epoch, before shuffling.
inline std::vector<RegistrationPair> epoch_pairs(const TrainData& data, const TrainConfig& config,
                                                 std::size_t epoch) {
  const Rng root = Rng(config.seed).split(0);
  std::vector<RegistrationPair> pairs;
  pairs.reserve(data.shapes.size() * config.pairs_per_shape);
  for (std::size_t s = 0; s < data.shapes.size(); ++s)
    for (std::size_t r = 0; r < config.pairs_per_shape; ++r) {
      PairSpec spec = data.spec;
      spec.seed = detail::derived_seed(root, epoch, s * config.pairs_per_shape + r);
      pairs.push_back(make_pair(data.shapes[s], spec));
    }
  return pairs;
}

inline std::vector<std::size_t> epoch_order(const TrainConfig& config, std::size_t epoch, std::size_t n) {
  Rng rng = Rng(config.seed).split(1).split(epoch);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

inline Rng pair_rng(const TrainConfig& config, std::size_t epoch, std::size_t index) {
  return Rng(config.seed).split(2).split(epoch).split(index);
}

struct Algorithm {
  enum class Kind { kIcp, kPrnet, kOracle };
  std::string name;
  Kind kind = Kind::kIcp;
  const ModelParams* params = nullptr;
  TrainConfig config;
  IcpConfig icp;
};

struct EvalRow {
  std::string name;
  MetricsReport metrics;
  double mean_seconds = 0.0;
  std::vector<RigidTransform> predictions;
  std::vector<RegistrationResult> results;
};

/// Eval-mode PRNet registration of held-out pair `index`.
inline PrnetOutcome prnet_eval(const RegistrationPair& pair, const ModelParams& params,
                               const TrainConfig& config, std::size_t index) {
  return prnet_register(pair, params, config, Rng(config.seed).split(3).split(index), false);
}

inline EvalRow evaluate_one(const std::vector<RegistrationPair>& pairs, const Algorithm& algo,
                            std::size_t threads = 1) {
  if (pairs.empty()) throw EmptyInput("evaluate: no pairs");
  EvalRow row;
  row.name = algo.name;
  row.results.resize(pairs.size());
  detail::parallel_for(pairs.size(), threads, [&](std::size_t i, std::size_t) {
    switch (algo.kind) {
      case Algorithm::Kind::kIcp: row.results[i] = icp_register(pairs[i].source, pairs[i].target, algo.icp); break;
      case Algorithm::Kind::kPrnet:
        if (!algo.params) throw InvalidArgument("evaluate: prnet algorithm without parameters");
        row.results[i] = prnet_eval(pairs[i], *algo.params, algo.config, i).result;
        break;
      case Algorithm::Kind::kOracle: {
        RegistrationResult r;
        r.final_transform = pairs[i].ground_truth;
        row.results[i] = r;
        break;
      }
    }
  });
  std::vector<RigidTransform> truths;
  double seconds = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    row.predictions.push_back(row.results[i].final_transform);
    truths.push_back(pairs[i].ground_truth);
    seconds += row.results[i].elapsed_seconds;
  }
  row.metrics = compute_metrics(row.predictions, truths);
  row.mean_seconds = seconds / static_cast<double>(pairs.size());
  return row;
}

inline std::vector<EvalRow> evaluate(const std::vector<RegistrationPair>& pairs,
                                     const std::vector<Algorithm>& algorithms, std::size_t threads = 1) {
  std::vector<EvalRow> rows;
  for (const auto& a : algorithms) rows.push_back(evaluate_one(pairs, a, threads));
  return rows;
}

/// Continues training from `state` up to config.epochs.
inline TrainState train(const TrainData& data, const TrainConfig& config, TrainState state,
                        const TrainHooks& hooks = {}) {
  config.validate();
  if (data.shapes.empty()) throw DataError("train: empty dataset");
  const std::size_t threads = config.threads;
  for (std::size_t epoch = state.epochs_completed; epoch < config.epochs; ++epoch) {
    if (hooks.stop_after && state.epochs_completed >= *hooks.stop_after) break;
    const double lr = learning_rate(config, epoch);
    const std::vector<RegistrationPair> pairs = epoch_pairs(data, config, epoch);
    const std::vector<std::size_t> order = epoch_order(config, epoch, pairs.size());
    double loss_sum = 0.0;
    LossTerms term_sum;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size) {
      const std::size_t nb = std::min(config.batch_size, order.size() - b0);
      std::vector<std::vector<std::vector<double>>> grads(nb);
      std::vector<PrnetOutcome> outcomes(nb);
      std::vector<ModelParams> copies;
      for (std::size_t w = 0; w < std::min(threads, nb); ++w)
        copies.push_back(threads == 1 ? state.params : state.params.clone());
      detail::parallel_for(nb, threads, [&](std::size_t i, std::size_t w) {
        const std::size_t idx = order[b0 + i];
        const ModelParams& p = copies[w];
        ad::tape().clear();
        RegisterOptions opt;
        opt.epoch = epoch;
        opt.epochs = config.epochs;
        outcomes[i] = prnet_register(pairs[idx], p, config, pair_rng(config, epoch, idx), true, opt);
        const double l = outcomes[i].loss->item();
        if (!std::isfinite(l)) {
          ad::tape().clear();
          throw NumericalFailure("train: non-finite loss at epoch " + std::to_string(epoch + 1));
        }
        grads[i] = flatten_gradients(p, ad::backward(*outcomes[i].loss));
      });
      std::vector<std::vector<double>> sum = grads[0];
      for (std::size_t i = 1; i < nb; ++i)
        for (std::size_t a = 0; a < sum.size(); ++a)
          for (std::size_t k = 0; k < sum[a].size(); ++k) sum[a][k] += grads[i][a][k];
      for (auto& g : sum)
        for (auto& v : g) {
          v /= static_cast<double>(nb);
          if (!std::isfinite(v)) throw NumericalFailure("train: non-finite gradient");
        }
      adam_step(state.params, sum, state.adam, config, lr);
      for (std::size_t i = 0; i < nb; ++i) {
        loss_sum += outcomes[i].loss->item();
        term_sum.motion += outcomes[i].terms.motion;
        term_sum.cycle += outcomes[i].terms.cycle;
        term_sum.feature += outcomes[i].terms.feature;
        if (hooks.on_registration) hooks.on_registration(pairs[order[b0 + i]], outcomes[i].result);
      }
    }
    if (!state.params.all_finite()) throw NumericalFailure("train: parameters became non-finite");
    EpochLog log;
    log.epoch = epoch + 1;
    log.lr = lr;
    const double n = static_cast<double>(pairs.size());
    log.mean_loss = loss_sum / n;
    const double steps = n * static_cast<double>(config.iterations);
    log.mean_terms = {term_sum.motion / steps, term_sum.cycle / steps, term_sum.feature / steps};
    if (!data.eval_pairs.empty() && (log.epoch % std::max<std::size_t>(1, data.eval_every) == 0 ||
                                     log.epoch == config.epochs)) {
      Algorithm a{"prnet", Algorithm::Kind::kPrnet, &state.params, config, {}};
      log.eval = evaluate_one(data.eval_pairs, a, threads).metrics;
    }
    state.epochs_completed = epoch + 1;
    state.log.push_back(log);
    if (hooks.on_epoch) hooks.on_epoch(log);
    if (hooks.on_checkpoint &&
        ((config.checkpoint_every && state.epochs_completed % config.checkpoint_every == 0) ||
         state.epochs_completed == config.epochs))
      hooks.on_checkpoint(state);
  }
  return state;
}

inline TrainState train(const TrainData& data, const TrainConfig& config, ModelParams model,
                        const TrainHooks& hooks = {}) {
  TrainState s;
  s.params = std::move(model);
  return train(data, config, std::move(s), hooks);
}

// ---------------------------------------------------------------------------
// Training checkpoints

inline Checkpoint train_checkpoint(const TrainState& state, const TrainConfig& config) {
  Checkpoint ck = model_checkpoint(state.params);
  ck.meta["train"] = to_json(config);
  ck.meta["epochs_completed"] = state.epochs_completed;
  ck.meta["adam_step"] = state.adam.step;
  json log = json::array();
  for (const auto& e : state.log) log.push_back(to_json(e));
  ck.meta["log"] = std::move(log);
  if (!state.adam.m.empty()) {
    std::size_t i = 0;
    state.params.for_each([&](const std::string& name, const Tensor& t) {
      ck.tensors.emplace_back("adam.m/" + name, Tensor(t.shape(), state.adam.m[i]));
      ck.tensors.emplace_back("adam.v/" + name, Tensor(t.shape(), state.adam.v[i]));
      ++i;
    });
  }
  return ck;
}

inline EpochLog epoch_log_from_json(const json& j) {
  EpochLog e;
  e.epoch = j.at("epoch").get<std::size_t>();
  e.lr = j.at("lr").get<double>();
  e.mean_loss = j.at("mean_loss").get<double>();
  e.mean_terms = {j.at("mean_motion_loss").get<double>(), j.at("mean_cycle_loss").get<double>(),
                  j.at("mean_feature_loss").get<double>()};
  if (j.contains("eval")) {
    const auto& m = j.at("eval");
    auto num = [](const json& v) {
      if (v.is_string()) return v.get<std::string>() == "inf" ? HUGE_VAL : -HUGE_VAL;
      return v.get<double>();
    };
    MetricsReport r;
    r.rotation = {num(m.at("mse_r")), num(m.at("rmse_r")), num(m.at("mae_r")), num(m.at("r2_r"))};
    r.translation = {num(m.at("mse_t")), num(m.at("rmse_t")), num(m.at("mae_t")), num(m.at("r2_t"))};
    r.count = m.at("count").get<std::size_t>();
    e.eval = r;
  }
  return e;
}

inline TrainState train_state_from_checkpoint(const Checkpoint& ck) {
  TrainState s;
  s.params = model_from_checkpoint(ck);
  s.epochs_completed = ck.meta.value("epochs_completed", std::size_t{0});
  s.adam.step = ck.meta.value("adam_step", std::uint64_t{0});
  if (ck.meta.contains("log"))
    for (const auto& e : ck.meta.at("log")) s.log.push_back(epoch_log_from_json(e));
  if (s.adam.step > 0) {
    s.params.for_each([&](const std::string& name, const Tensor& t) {
      const Tensor* m = ck.find("adam.m/" + name);
      const Tensor* v = ck.find("adam.v/" + name);
      if (!m || !v || m->numel() != t.numel() || v->numel() != t.numel())
        throw DataError("checkpoint: missing optimizer state for '" + name + "'");
      s.adam.m.push_back(m->values());
      s.adam.v.push_back(v->values());
    });
  }
  return s;
}

}  // namespace prnet
