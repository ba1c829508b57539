// prnet: data generation, training, registration, evaluation, ablations and
// figure export.
#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "prnet/dataset.hpp"
#include "prnet/pipeline.hpp"
#include "prnet/viz.hpp"

namespace fs = std::filesystem;
using namespace prnet;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfigError = 2, kDataError = 3, kNumericalError = 4 };

// Flags shared by several subcommands; unset optionals leave the config
// document's value alone.
struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_points, n_partial;
  std::optional<double> rot_range, trans_range, noise_sigma, noise_clip;
  std::optional<std::size_t> epochs, iterations, keypoints, batch_size, pairs_per_shape, threads;
  std::optional<double> gamma, lr;
  std::string keypoint_strategy, temp_mode, st_backward;
};

void add_pair_flags(CLI::App* app, CommonFlags& f) {
  app->add_option("--n-points", f.n_points, "Points sampled per cloud");
  app->add_option("--n-partial", f.n_partial, "Points kept in each partial view");
  app->add_option("--rot-range", f.rot_range, "Per-axis rotation bound in degrees");
  app->add_option("--trans-range", f.trans_range, "Per-axis translation bound");
  app->add_option("--noise-sigma", f.noise_sigma, "Gaussian noise standard deviation");
  app->add_option("--noise-clip", f.noise_clip, "Absolute noise clip bound");
}

void add_model_flags(CLI::App* app, CommonFlags& f) {
  app->add_option("--iters,-P", f.iterations, "Refinement iterations P");
  app->add_option("--keypoints,-k", f.keypoints, "Keypoint count k");
  app->add_option("--keypoint-strategy", f.keypoint_strategy, "l2norm | random | centrality");
  app->add_option("--temp-mode", f.temp_mode, "fixed:<v> | annealed[:a:b] | learned | predicted");
  app->add_option("--st-backward", f.st_backward, "relaxed | plain_softmax");
}

void add_train_flags(CLI::App* app, CommonFlags& f) {
  app->add_option("--epochs", f.epochs, "Training epochs");
  app->add_option("--gamma", f.gamma, "Discount factor");
  app->add_option("--lr", f.lr, "Initial learning rate");
  app->add_option("--batch-size", f.batch_size, "Pairs per optimizer step");
  app->add_option("--pairs-per-shape", f.pairs_per_shape, "Fresh pairs per shape per epoch");
  app->add_option("--threads", f.threads, "Worker threads");
}

/// Default config from $PRNET_CONFIG or --config, then flag overrides.
CliConfig resolve_config(const CommonFlags& f) {
  CliConfig c;
  std::string path = f.config_path;
  if (path.empty())
    if (const char* env = std::getenv("PRNET_CONFIG")) path = env;
  if (!path.empty()) c = load_config_file(path);
  if (f.seed) {
    c.pairs.seed = *f.seed;
    c.train.seed = *f.seed;
  }
  if (f.n_points) c.pairs.n_points = *f.n_points;
  if (f.n_partial) c.pairs.n_partial = *f.n_partial;
  if (f.rot_range) c.pairs.rot_range_deg = *f.rot_range;
  if (f.trans_range) c.pairs.trans_range = *f.trans_range;
  if (f.noise_sigma) c.pairs.noise_sigma = *f.noise_sigma;
  if (f.noise_clip) c.pairs.noise_clip = *f.noise_clip;
  if (f.epochs) c.train.epochs = *f.epochs;
  if (f.iterations) c.train.iterations = *f.iterations;
  if (f.keypoints) c.train.keypoints.k = *f.keypoints;
  if (f.batch_size) c.train.batch_size = *f.batch_size;
  if (f.pairs_per_shape) c.train.pairs_per_shape = *f.pairs_per_shape;
  if (f.threads) c.train.threads = *f.threads;
  if (f.gamma) c.train.gamma = *f.gamma;
  if (f.lr) c.train.lr = *f.lr;
  if (!f.keypoint_strategy.empty()) c.train.keypoints.kind = parse_keypoint_kind(f.keypoint_strategy);
  if (!f.temp_mode.empty()) {
    try {
      c.train.temperature = parse_temperature_mode(f.temp_mode);
    } catch (const NonPositiveTemperature& e) {
      throw ConfigError(e.what());
    }
  }
  if (!f.st_backward.empty()) c.train.st_backward = parse_st_backward(f.st_backward);
  try {
    c.pairs.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  c.model.validate();
  c.train.validate();
  return c;
}

PointCloud read_cloud(const std::string& path, std::size_t n_points, std::uint64_t seed) {
  if (fs::path(path).extension() == ".xyz") {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    return read_xyz(in);
  }
  return load_point_cloud(path, n_points, seed);
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << text;
}

std::string metrics_table(const std::vector<EvalRow>& rows, bool timing, const std::string& key_header = "algorithm",
                          const std::vector<std::string>& keys = {}) {
  std::ostringstream os;
  os << std::left << std::setw(14) << key_header;
  for (const char* h : {"MSE(R)", "RMSE(R)", "MAE(R)", "R2(R)", "MSE(t)", "RMSE(t)", "MAE(t)", "R2(t)"})
    os << std::right << std::setw(12) << h;
  if (timing) os << std::setw(12) << "sec/reg";
  os << "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& m = rows[i].metrics;
    os << std::left << std::setw(14) << (keys.empty() ? rows[i].name : keys[i]) << std::right << std::fixed;
    for (const auto* q : {&m.rotation, &m.translation})
      os << std::setprecision(6) << std::setw(12) << q->mse << std::setw(12) << q->rmse << std::setw(12) << q->mae
         << std::setw(12) << q->r2;
    if (timing) os << std::setprecision(6) << std::setw(12) << rows[i].mean_seconds;
    os << "\n";
  }
  return os.str();
}

std::string metrics_csv(const std::vector<EvalRow>& rows, bool timing, const std::string& key_header = "algorithm",
                        const std::vector<std::string>& keys = {}) {
  std::ostringstream os;
  os << key_header << ",mse_r,rmse_r,mae_r,r2_r,mse_t,rmse_t,mae_t,r2_t" << (timing ? ",seconds" : "") << "\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& m = rows[i].metrics;
    os << (keys.empty() ? rows[i].name : keys[i]);
    for (const auto* q : {&m.rotation, &m.translation}) os << "," << q->mse << "," << q->rmse << "," << q->mae << "," << q->r2;
    if (timing) os << "," << rows[i].mean_seconds;
    os << "\n";
  }
  return os.str();
}

Dataset dataset_from_flags(bool builtin, const std::string& input, std::size_t shapes, std::size_t pairs,
                           const PairSpec& spec) {
  if (builtin == !input.empty()) throw ConfigError("give exactly one of --builtin or --input");
  if (builtin) return builtin_dataset(shapes, pairs, spec);
  auto [names, clouds] = load_shape_directory(input, spec);
  return make_dataset(std::move(names), std::move(clouds), spec, pairs);
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  CommonFlags common;
  bool builtin = false;
  std::string input, out;
  std::size_t shapes = 8, pairs = 32;
};

int cmd_gen_data(const GenDataArgs& a) {
  const CliConfig cfg = resolve_config(a.common);
  const Dataset d = dataset_from_flags(a.builtin, a.input, a.shapes, a.pairs, cfg.pairs);
  write_dataset(a.out, d);
  std::cout << json({{"out", a.out}, {"shapes", d.shapes.size()}, {"pairs", d.pairs.size()},
                     {"spec", to_json(d.spec)}})
                   .dump()
            << "\n";
  return kOk;
}

struct TrainArgs {
  CommonFlags common;
  std::string data, eval_data, checkpoint = "prnet.ckpt", log = "train_log.jsonl", resume;
  bool builtin = false;
  std::size_t shapes = 8;
  std::size_t eval_every = 1;
};

int cmd_train(const TrainArgs& a) {
  CliConfig cfg = resolve_config(a.common);
  TrainState state;
  if (!a.resume.empty()) {
    const Checkpoint ck = read_checkpoint(a.resume);
    state = train_state_from_checkpoint(ck);
    // The checkpoint's training config wins, except for explicit overrides
    // that only extend or re-thread the run.
    if (ck.meta.contains("train")) {
      TrainConfig stored;
      from_json(ck.meta.at("train"), stored);
      if (a.common.epochs) stored.epochs = *a.common.epochs;
      if (a.common.threads) stored.threads = *a.common.threads;
      cfg.train = stored;
    }
    cfg.model = state.params.config;
    if (ck.meta.contains("pairs")) from_json(ck.meta.at("pairs"), cfg.pairs);
  } else {
    state.params = init_model(cfg.model, Rng(cfg.train.seed).split(99));
  }
  TrainData data;
  if (a.builtin == !a.data.empty()) throw ConfigError("give exactly one of --builtin or --data");
  if (a.builtin) {
    for (auto& s : builtin_shapes(a.shapes, cfg.pairs.n_points, cfg.pairs.seed)) data.shapes.push_back(s.cloud);
  } else {
    Dataset d = read_dataset(a.data);
    data.shapes = std::move(d.shapes);
    if (a.common.n_points == std::nullopt && a.common.n_partial == std::nullopt && a.resume.empty()) {
      const auto seed = cfg.pairs.seed;
      cfg.pairs = d.spec;
      cfg.pairs.seed = seed;
    }
  }
  data.spec = cfg.pairs;
  data.eval_every = a.eval_every;
  if (!a.eval_data.empty()) data.eval_pairs = read_dataset(a.eval_data).pairs;

  std::ofstream log(a.log, std::ios::binary);
  if (!log) throw DataError("cannot write log '" + a.log + "'");
  for (const auto& e : state.log) log << to_json(e).dump() << "\n";
  log.flush();
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) {
    log << to_json(e).dump() << "\n";
    log.flush();
    std::cerr << "epoch " << e.epoch << " loss " << e.mean_loss << "\n";
  };
  hooks.on_checkpoint = [&](const TrainState& s) {
    Checkpoint ck = train_checkpoint(s, cfg.train);
    ck.meta["pairs"] = to_json(cfg.pairs);
    write_checkpoint(a.checkpoint, ck);
  };
  if (state.epochs_completed >= cfg.train.epochs) {
    std::cerr << "checkpoint already at epoch " << state.epochs_completed << "\n";
    return kOk;
  }
  train(data, cfg.train, std::move(state), hooks);
  return kOk;
}

struct RegisterArgs {
  CommonFlags common;
  std::string source, target, checkpoint, algo = "prnet";
};

int cmd_register(const RegisterArgs& a) {
  CliConfig cfg = resolve_config(a.common);
  RegistrationPair pair;
  pair.source = read_cloud(a.source, cfg.pairs.n_points, cfg.pairs.seed);
  pair.target = read_cloud(a.target, cfg.pairs.n_points, cfg.pairs.seed + 1);
  RegistrationResult result;
  if (a.algo == "icp") {
    result = icp_register(pair.source, pair.target, cfg.icp);
  } else if (a.algo == "prnet") {
    if (a.checkpoint.empty()) throw ConfigError("--algo prnet needs --checkpoint");
    const ModelParams params = model_from_checkpoint(read_checkpoint(a.checkpoint));
    result = prnet_register(pair, params, cfg.train, Rng(cfg.train.seed).split(3), false).result;
  } else {
    throw ConfigError("unknown --algo '" + a.algo + "' (icp|prnet)");
  }
  std::cout << to_json(result).dump(2) << "\n";
  return kOk;
}

std::vector<Algorithm> parse_algorithms(const std::vector<std::string>& names, const std::string& checkpoint,
                                        const CliConfig& cfg, std::optional<ModelParams>& storage) {
  std::vector<Algorithm> algos;
  for (const auto& n : names) {
    Algorithm a;
    a.name = n;
    a.config = cfg.train;
    a.icp = cfg.icp;
    if (n == "icp") {
      a.kind = Algorithm::Kind::kIcp;
    } else if (n == "oracle") {
      a.kind = Algorithm::Kind::kOracle;
    } else if (n == "prnet") {
      if (checkpoint.empty()) throw ConfigError("algorithm prnet needs --checkpoint");
      if (!storage) storage = model_from_checkpoint(read_checkpoint(checkpoint));
      a.kind = Algorithm::Kind::kPrnet;
      a.params = &*storage;
    } else {
      throw ConfigError("unknown algorithm '" + n + "' (icp|prnet|oracle)");
    }
    algos.push_back(a);
  }
  return algos;
}

struct EvalArgs {
  CommonFlags common;
  std::string data, checkpoint, csv;
  std::vector<std::string> algos{"icp"};
  bool timing = false;
};

int cmd_eval(const EvalArgs& a) {
  const CliConfig cfg = resolve_config(a.common);
  const Dataset d = read_dataset(a.data);
  std::optional<ModelParams> storage;
  const auto algos = parse_algorithms(a.algos, a.checkpoint, cfg, storage);
  const auto rows = evaluate(d.pairs, algos, cfg.train.threads);
  json out = json::array();
  for (const auto& r : rows) {
    json j = {{"algorithm", r.name}, {"metrics", to_json(r.metrics)}};
    if (a.timing) j["mean_seconds"] = r.mean_seconds;
    out.push_back(std::move(j));
  }
  std::cout << out.dump(2) << "\n" << metrics_table(rows, a.timing);
  if (!a.csv.empty()) write_file(a.csv, metrics_csv(rows, a.timing));
  return kOk;
}

struct AblateArgs {
  CommonFlags common;
  std::string axis, csv, json_out;
  std::vector<std::string> values;
  std::size_t shapes = 16, eval_pairs = 20;
};

int cmd_ablate(const AblateArgs& a) {
  const CliConfig base = resolve_config(a.common);
  if (a.values.empty()) throw ConfigError("--values must list at least one value");
  auto number = [](const std::string& v) {
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError("bad sweep value '" + v + "'");
    return x;
  };
  std::string header;
  std::vector<EvalRow> rows;
  json report = json::array();
  for (const auto& v : a.values) {
    CliConfig c = base;
    if (a.axis == "keypoint-strategy") {
      header = "strategy";
      c.train.keypoints.kind = parse_keypoint_kind(v);
    } else if (a.axis == "k") {
      header = "k";
      c.train.keypoints.k = static_cast<std::size_t>(number(v));
    } else if (a.axis == "gamma") {
      header = "gamma";
      c.train.gamma = number(v);
    } else if (a.axis == "missing-ratio") {
      header = "missing";
      const double r = number(v);
      if (!(r >= 0.0 && r < 1.0)) throw ConfigError("missing ratio must be in [0, 1)");
      c.pairs.n_partial = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::lround((1.0 - r) * static_cast<double>(c.pairs.n_points))));
    } else if (a.axis == "noise") {
      header = "noise";
      c.pairs.noise_sigma = number(v);
    } else if (a.axis == "temp-mode") {
      header = "temp_mode";
      c.train.temperature = parse_temperature_mode(v);
    } else {
      throw ConfigError("unknown --axis '" + a.axis + "' (keypoint-strategy|k|gamma|missing-ratio|noise|temp-mode)");
    }
    try {
      c.pairs.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
    c.train.validate();
    TrainData data;
    for (auto& s : builtin_shapes(a.shapes, c.pairs.n_points, c.pairs.seed)) data.shapes.push_back(s.cloud);
    data.spec = c.pairs;
    PairSpec held = c.pairs;
    held.seed = c.pairs.seed + 1000003;
    const Dataset eval = builtin_dataset(a.eval_pairs, a.eval_pairs, held);
    const ModelParams init = init_model(c.model, Rng(c.train.seed).split(99));
    std::cerr << a.axis << " = " << v << ": training\n";
    const TrainState st = train(data, c.train, init);
    Algorithm alg{"prnet", Algorithm::Kind::kPrnet, &st.params, c.train, c.icp};
    EvalRow row = evaluate_one(eval.pairs, alg, c.train.threads);
    row.name = v;
    report.push_back({{header, v}, {"config", to_json(c)}, {"metrics", to_json(row.metrics)}});
    rows.push_back(std::move(row));
  }
  std::cout << metrics_table(rows, false, header);
  if (!a.csv.empty()) write_file(a.csv, metrics_csv(rows, false, header));
  if (!a.json_out.empty()) write_file(a.json_out, report.dump(2) + "\n");
  return kOk;
}

struct VizArgs {
  CommonFlags common;
  std::string source, target, checkpoint, data, out = "viz", algo = "prnet";
  std::size_t index = 0;
};

int cmd_export_viz(const VizArgs& a) {
  const CliConfig cfg = resolve_config(a.common);
  RegistrationPair pair;
  if (!a.data.empty()) {
    Dataset d = read_dataset(a.data);
    if (a.index >= d.pairs.size()) throw DataError("--index out of range");
    pair = d.pairs[a.index];
  } else {
    if (a.source.empty() || a.target.empty()) throw ConfigError("need --data or both --source and --target");
    pair.source = read_cloud(a.source, cfg.pairs.n_points, cfg.pairs.seed);
    pair.target = read_cloud(a.target, cfg.pairs.n_points, cfg.pairs.seed + 1);
  }
  RegistrationResult result;
  if (a.algo == "prnet") {
    if (a.checkpoint.empty()) throw ConfigError("--algo prnet needs --checkpoint");
    const ModelParams params = model_from_checkpoint(read_checkpoint(a.checkpoint));
    result = prnet_register(pair, params, cfg.train, Rng(cfg.train.seed).split(3), false).result;
  } else if (a.algo == "icp") {
    result = icp_register(pair.source, pair.target, cfg.icp);
  } else {
    throw ConfigError("unknown --algo '" + a.algo + "' (icp|prnet)");
  }
  VizScene before{pair.source, pair.target, {}, {}, {}};
  if (!result.per_step.empty() && result.per_step.front().acp) {
    const auto& d = *result.per_step.front().acp;
    before.source_keypoints = d.source_keypoints;
    before.target_keypoints = d.target_keypoints;
    before.correspondences = step_correspondences(d);
  }
  VizScene after = before;
  after.source = apply_transform(result.final_transform, pair.source);
  json steps = json::array();
  for (const auto& s : result.per_step) {
    json sj = {{"transform", to_json(s.transform)}};
    if (s.acp) {
      sj["source_keypoints"] = s.acp->source_keypoints;
      sj["target_keypoints"] = s.acp->target_keypoints;
      json pairs = json::array();
      for (const auto& c : step_correspondences(*s.acp)) pairs.push_back({c.source, c.target});
      sj["correspondences"] = std::move(pairs);
      sj["lambda"] = s.acp->lambda;
    }
    steps.push_back(std::move(sj));
  }
  const fs::path out(a.out);
  write_file(out / "viz.json",
             json({{"keypoint_count", before.source_keypoints.size()},
                   {"final", to_json(result.final_transform)},
                   {"steps", std::move(steps)}})
                     .dump(2) +
                 "\n");
  write_file(out / "before.svg", render_svg(before, "before alignment"));
  write_file(out / "after.svg", render_svg(after, "after alignment"));
  std::cout << json({{"out", out.string()}, {"files", {"viz.json", "before.svg", "after.svg"}}}).dump() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PRNet-style partial-to-partial point cloud registration"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for all subcommands");

  auto add_common = [](CLI::App* sub, CommonFlags& f) {
    sub->add_option("--config", f.config_path, "JSON config file (default: $PRNET_CONFIG)");
    sub->add_option("--seed", f.seed, "Random seed");
  };

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate partial registration pairs");
  add_common(gen_cmd, gen.common);
  add_pair_flags(gen_cmd, gen.common);
  gen_cmd->add_flag("--builtin", gen.builtin, "Use the builtin procedural shapes");
  gen_cmd->add_option("--input", gen.input, "Directory of OFF/PLY/XYZ shapes");
  gen_cmd->add_option("--shapes", gen.shapes, "Builtin shape count");
  gen_cmd->add_option("--pairs", gen.pairs, "Pair count");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  add_common(train_cmd, tr.common);
  add_pair_flags(train_cmd, tr.common);
  add_model_flags(train_cmd, tr.common);
  add_train_flags(train_cmd, tr.common);
  train_cmd->add_option("--data", tr.data, "Dataset directory (its shapes are used)");
  train_cmd->add_flag("--builtin", tr.builtin, "Train on builtin procedural shapes");
  train_cmd->add_option("--shapes", tr.shapes, "Builtin shape count");
  train_cmd->add_option("--eval-data", tr.eval_data, "Held-out dataset evaluated during training");
  train_cmd->add_option("--eval-every", tr.eval_every, "Epochs between held-out evaluations");
  train_cmd->add_option("--checkpoint", tr.checkpoint, "Checkpoint output path");
  train_cmd->add_option("--log", tr.log, "JSON-lines training log path");
  train_cmd->add_option("--resume", tr.resume, "Checkpoint to resume from");

  RegisterArgs reg;
  auto* reg_cmd = app.add_subcommand("register", "Register two point files and print the result as JSON");
  add_common(reg_cmd, reg.common);
  add_model_flags(reg_cmd, reg.common);
  reg_cmd->add_option("--n-points", reg.common.n_points, "Points sampled from mesh inputs");
  reg_cmd->add_option("--source", reg.source, "Source point file")->required();
  reg_cmd->add_option("--target", reg.target, "Target point file")->required();
  reg_cmd->add_option("--checkpoint", reg.checkpoint, "Model checkpoint");
  reg_cmd->add_option("--algo", reg.algo, "prnet | icp");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate algorithms on a dataset");
  add_common(eval_cmd, ev.common);
  add_model_flags(eval_cmd, ev.common);
  eval_cmd->add_option("--threads", ev.common.threads, "Worker threads");
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--algo", ev.algos, "icp | prnet | oracle (repeatable or comma separated)")->delimiter(',');
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Model checkpoint for prnet");
  eval_cmd->add_flag("--timing", ev.timing, "Report mean seconds per registration");
  eval_cmd->add_option("--csv", ev.csv, "Also write the table as CSV");

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate over one swept setting");
  add_common(ablate_cmd, ab.common);
  add_pair_flags(ablate_cmd, ab.common);
  add_model_flags(ablate_cmd, ab.common);
  add_train_flags(ablate_cmd, ab.common);
  ablate_cmd->add_option("--axis", ab.axis, "keypoint-strategy | k | gamma | missing-ratio | noise | temp-mode")
      ->required();
  ablate_cmd->add_option("--values", ab.values, "Comma separated sweep values")->required()->delimiter(',');
  ablate_cmd->add_option("--shapes", ab.shapes, "Builtin training shapes");
  ablate_cmd->add_option("--eval-pairs", ab.eval_pairs, "Held-out evaluation pairs");
  ablate_cmd->add_option("--csv", ab.csv, "Also write the table as CSV");
  ablate_cmd->add_option("--json", ab.json_out, "Also write the full report as JSON");

  VizArgs viz;
  auto* viz_cmd = app.add_subcommand("export-viz", "Write SVG figures and keypoint JSON for one registration");
  add_common(viz_cmd, viz.common);
  add_model_flags(viz_cmd, viz.common);
  viz_cmd->add_option("--n-points", viz.common.n_points, "Points sampled from mesh inputs");
  viz_cmd->add_option("--data", viz.data, "Dataset directory");
  viz_cmd->add_option("--index", viz.index, "Pair index within --data");
  viz_cmd->add_option("--source", viz.source, "Source point file");
  viz_cmd->add_option("--target", viz.target, "Target point file");
  viz_cmd->add_option("--checkpoint", viz.checkpoint, "Model checkpoint");
  viz_cmd->add_option("--algo", viz.algo, "prnet | icp");
  viz_cmd->add_option("--out", viz.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(tr);
    if (*reg_cmd) return cmd_register(reg);
    if (*eval_cmd) return cmd_eval(ev);
    if (*ablate_cmd) return cmd_ablate(ab);
    if (*viz_cmd) return cmd_export_viz(viz);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumericalError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const ParseError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const TooFewPoints& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
