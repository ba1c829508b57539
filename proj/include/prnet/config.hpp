// Training configuration and the schema-versioned JSON configuration
// document. Unknown keys are rejected at every level.
#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "prnet/icp.hpp"
#include "prnet/matcher.hpp"

namespace prnet {

using json = nlohmann::ordered_json;

struct TrainConfig {
  std::size_t iterations = 3;  // P
  double gamma = 0.9;
  double alpha = 0.1;
  double beta = 0.1;
  std::size_t epochs = 100;
  double lr = 1e-3;
  std::vector<std::size_t> lr_drop_epochs{30, 60, 80};
  double lr_drop_factor = 10.0;
  double weight_decay = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 1;
  std::uint64_t seed = 1;

  KeypointStrategy keypoints;
  TemperatureMode temperature;
  StBackward st_backward = StBackward::kRelaxed;
  /// Keep Gumbel sampling when not training.
  bool eval_noise = false;
  /// Also add the rigid-motion loss of the Y -> X direction.
  bool symmetric_motion_loss = false;
  /// Fresh pairs drawn from each training shape per epoch.
  std::size_t pairs_per_shape = 1;
  /// Worker threads for gradient accumulation and evaluation.
  std::size_t threads = 1;
  /// Write a checkpoint every this many epochs (0: only at the end).
  std::size_t checkpoint_every = 0;

  void validate() const {
    if (iterations < 1) throw ConfigError("TrainConfig: P must be >= 1");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("TrainConfig: gamma must be in (0, 1]");
    if (alpha < 0.0 || beta < 0.0) throw ConfigError("TrainConfig: alpha, beta must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("TrainConfig: lr must be > 0");
    if (!(lr_drop_factor > 0.0)) throw ConfigError("TrainConfig: lr_drop_factor must be > 0");
    if (weight_decay < 0.0) throw ConfigError("TrainConfig: weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (pairs_per_shape < 1) throw ConfigError("TrainConfig: pairs_per_shape must be >= 1");
    if (threads < 1) throw ConfigError("TrainConfig: threads must be >= 1");
    keypoints.validate();
    try {
      temperature.validate();
    } catch (const NonPositiveTemperature& e) {
      throw ConfigError(e.what());
    }
  }
};

/// Everything a CLI run can configure.
struct CliConfig {
  static constexpr int kSchemaVersion = 1;
  PairSpec pairs;
  ModelConfig model;
  TrainConfig train;
  IcpConfig icp;
};

namespace detail {

// Reads fields from a JSON object and complains about anything left over.
class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  [[nodiscard]] const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const PairSpec& s) {
  return {{"n_points", s.n_points},       {"n_partial", s.n_partial},     {"rot_range_deg", s.rot_range_deg},
          {"trans_range", s.trans_range}, {"noise_sigma", s.noise_sigma}, {"noise_clip", s.noise_clip},
          {"seed", s.seed}};
}

inline void from_json(const json& j, PairSpec& s, const std::string& where = "pairs") {
  detail::StrictObject o(j, where);
  o.get("n_points", s.n_points);
  o.get("n_partial", s.n_partial);
  o.get("rot_range_deg", s.rot_range_deg);
  o.get("trans_range", s.trans_range);
  o.get("noise_sigma", s.noise_sigma);
  o.get("noise_clip", s.noise_clip);
  o.get("seed", s.seed);
  o.finish();
}

inline json to_json(const ModelConfig& m) {
  return {{"encoder",
           {{"layer_widths", m.encoder.layer_widths},
            {"knn_k", m.encoder.knn_k},
            {"embed_dim", m.encoder.embed_dim},
            {"leaky_slope", m.encoder.leaky_slope},
            {"normalize", m.encoder.normalize}}},
          {"cocontext", {{"heads", m.cocontext.heads}, {"ff_dim", m.cocontext.ff_dim}}},
          {"value_head",
           {{"widths", m.value.widths},
            {"lambda_floor", m.value.lambda_floor},
            {"initial_lambda", m.value.initial_lambda}}}};
}

inline void from_json(const json& j, ModelConfig& m, const std::string& where = "model") {
  detail::StrictObject o(j, where);
  if (const json* e = o.child("encoder")) {
    detail::StrictObject eo(*e, where + ".encoder");
    eo.get("layer_widths", m.encoder.layer_widths);
    eo.get("knn_k", m.encoder.knn_k);
    eo.get("embed_dim", m.encoder.embed_dim);
    eo.get("leaky_slope", m.encoder.leaky_slope);
    eo.get("normalize", m.encoder.normalize);
    eo.finish();
  }
  if (const json* c = o.child("cocontext")) {
    detail::StrictObject co(*c, where + ".cocontext");
    co.get("heads", m.cocontext.heads);
    co.get("ff_dim", m.cocontext.ff_dim);
    co.finish();
  }
  if (const json* v = o.child("value_head")) {
    detail::StrictObject vo(*v, where + ".value_head");
    vo.get("widths", m.value.widths);
    vo.get("lambda_floor", m.value.lambda_floor);
    vo.get("initial_lambda", m.value.initial_lambda);
    vo.finish();
  }
  o.finish();
}

inline json to_json(const TrainConfig& t) {
  return {{"P", t.iterations},
          {"gamma", t.gamma},
          {"alpha", t.alpha},
          {"beta", t.beta},
          {"epochs", t.epochs},
          {"lr", t.lr},
          {"lr_drop_epochs", t.lr_drop_epochs},
          {"lr_drop_factor", t.lr_drop_factor},
          {"weight_decay", t.weight_decay},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},
          {"batch_size", t.batch_size},
          {"seed", t.seed},
          {"keypoints", {{"kind", keypoint_kind_name(t.keypoints.kind)}, {"k", t.keypoints.k}}},
          {"temperature", temperature_mode_name(t.temperature)},
          {"st_backward", st_backward_name(t.st_backward)},
          {"eval_noise", t.eval_noise},
          {"symmetric_motion_loss", t.symmetric_motion_loss},
          {"pairs_per_shape", t.pairs_per_shape},
          {"threads", t.threads},
          {"checkpoint_every", t.checkpoint_every}};
}

inline void from_json(const json& j, TrainConfig& t, const std::string& where = "train") {
  detail::StrictObject o(j, where);
  o.get("P", t.iterations);
  o.get("gamma", t.gamma);
  o.get("alpha", t.alpha);
  o.get("beta", t.beta);
  o.get("epochs", t.epochs);
  o.get("lr", t.lr);
  o.get("lr_drop_epochs", t.lr_drop_epochs);
  o.get("lr_drop_factor", t.lr_drop_factor);
  o.get("weight_decay", t.weight_decay);
  o.get("adam_beta1", t.adam_beta1);
  o.get("adam_beta2", t.adam_beta2);
  o.get("adam_eps", t.adam_eps);
  o.get("batch_size", t.batch_size);
  o.get("seed", t.seed);
  if (const json* k = o.child("keypoints")) {
    detail::StrictObject ko(*k, where + ".keypoints");
    std::string kind = keypoint_kind_name(t.keypoints.kind);
    ko.get("kind", kind);
    t.keypoints.kind = parse_keypoint_kind(kind);
    ko.get("k", t.keypoints.k);
    ko.finish();
  }
  std::string temp = temperature_mode_name(t.temperature);
  o.get("temperature", temp);
  t.temperature = parse_temperature_mode(temp);
  std::string st = st_backward_name(t.st_backward);
  o.get("st_backward", st);
  t.st_backward = parse_st_backward(st);
  o.get("eval_noise", t.eval_noise);
  o.get("symmetric_motion_loss", t.symmetric_motion_loss);
  o.get("pairs_per_shape", t.pairs_per_shape);
  o.get("threads", t.threads);
  o.get("checkpoint_every", t.checkpoint_every);
  o.finish();
}

inline json to_json(const IcpConfig& c) {
  return {{"max_iterations", c.max_iterations}, {"convergence_tol", c.convergence_tol}};
}

inline void from_json(const json& j, IcpConfig& c, const std::string& where = "icp") {
  detail::StrictObject o(j, where);
  o.get("max_iterations", c.max_iterations);
  o.get("convergence_tol", c.convergence_tol);
  o.finish();
}

inline json to_json(const CliConfig& c) {
  return {{"schema_version", CliConfig::kSchemaVersion},
          {"pairs", to_json(c.pairs)},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"icp", to_json(c.icp)}};
}

/// Parses a configuration document over `base` (fields not mentioned keep
/// their values) and validates the result.
inline CliConfig parse_config(const json& j, CliConfig base = {}) {
  detail::StrictObject o(j, "config");
  int version = -1;
  o.get("schema_version", version);
  if (version != CliConfig::kSchemaVersion)
    throw ConfigError("config: schema_version must be " + std::to_string(CliConfig::kSchemaVersion));
  if (const json* p = o.child("pairs")) from_json(*p, base.pairs);
  if (const json* m = o.child("model")) from_json(*m, base.model);
  if (const json* t = o.child("train")) from_json(*t, base.train);
  if (const json* i = o.child("icp")) from_json(*i, base.icp);
  o.finish();
  try {
    base.pairs.validate();
    base.icp.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  base.model.validate();
  base.train.validate();
  return base;
}

inline CliConfig load_config_file(const std::string& path, CliConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
  return parse_config(j, std::move(base));
}

inline json to_json(const RigidTransform& t) {
  json r = json::array();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.push_back(t.rotation(i, j));
  return {{"rotation", r}, {"translation", {t.translation[0], t.translation[1], t.translation[2]}}};
}

inline RigidTransform transform_from_json(const json& j) {
  RigidTransform t;
  const auto& r = j.at("rotation");
  const auto& tr = j.at("translation");
  if (r.size() != 9 || tr.size() != 3) throw DataError("transform JSON: need 9 rotation and 3 translation numbers");
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 3; ++k) t.rotation(i, k) = r.at(static_cast<std::size_t>(3 * i + k)).get<double>();
    t.translation[i] = tr.at(static_cast<std::size_t>(i)).get<double>();
  }
  return t;
}

inline json to_json(const QuantityMetrics& q) {
  // R^2 may be -inf for zero-variance truth; JSON has no infinities.
  json r2 = std::isfinite(q.r2) ? json(q.r2) : json(q.r2 > 0 ? "inf" : "-inf");
  return {{"mse", q.mse}, {"rmse", q.rmse}, {"mae", q.mae}, {"r2", r2}};
}

inline json to_json(const MetricsReport& m) {
  json j;
  for (auto [prefix, q] : {std::pair{"r", &m.rotation}, std::pair{"t", &m.translation}}) {
    const json qj = to_json(*q);
    for (const auto& key : {"mse", "rmse", "mae", "r2"}) j[std::string(key) + "_" + prefix] = qj[key];
  }
  j["count"] = m.count;
  return j;
}

inline json to_json(const AcpDiagnostics& d) {
  return {{"lambda", d.lambda},
          {"temperature_mode", d.temperature_mode},
          {"source_keypoints", d.source_keypoints},
          {"target_keypoints", d.target_keypoints},
          {"matches", d.matches},
          {"mean_entropy", d.mean_entropy},
          {"objective", d.objective},
          {"degenerate", d.degenerate}};
}

inline json to_json(const RegistrationResult& r) {
  json steps = json::array();
  for (const auto& s : r.per_step) {
    json sj = {{"transform", to_json(s.transform)}, {"objective", s.objective}};
    if (s.acp) sj["diagnostics"] = to_json(*s.acp);
    steps.push_back(std::move(sj));
  }
  json j = to_json(r.final_transform);
  j["per_step"] = std::move(steps);
  j["elapsed_seconds"] = r.elapsed_seconds;
  j["converged"] = r.converged;
  j["degenerate"] = r.degenerate;
  return j;
}

}  // namespace prnet
