// On-disk datasets: a directory with dataset.json (spec echo and shape
// list), shapes/<name>.xyz, pairs.jsonl and one .xyz file per partial view.
#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "prnet/config.hpp"
#include "prnet/mesh_io.hpp"
#include "prnet/shapes.hpp"

namespace prnet {

struct Dataset {
  PairSpec spec;
  std::vector<std::string> shape_names;
  std::vector<PointCloud> shapes;
  std::vector<std::string> pair_shapes;
  std::vector<RegistrationPair> pairs;
};

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << text;
}

inline std::string xyz_string(const PointCloud& c) {
  std::ostringstream os;
  write_xyz(os, c);
  return os.str();
}

inline PointCloud read_xyz_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open '" + p.string() + "'");
  return read_xyz(in);
}

}  // namespace detail

/// Pair i uses shape i % shapes.size() and seed derived from (spec.seed, i).
inline Dataset make_dataset(std::vector<std::string> names, std::vector<PointCloud> shapes,
                            const PairSpec& spec, std::size_t n_pairs) {
  if (shapes.empty()) throw DataError("make_dataset: no shapes");
  Dataset d;
  d.spec = spec;
  d.shape_names = std::move(names);
  d.shapes = std::move(shapes);
  const Rng root = Rng(spec.seed).split(7);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    PairSpec s = spec;
    Rng r = root.split(i);
    s.seed = r();
    const std::size_t k = i % d.shapes.size();
    d.pair_shapes.push_back(d.shape_names[k]);
    d.pairs.push_back(make_pair(d.shapes[k], s));
  }
  return d;
}

inline Dataset builtin_dataset(std::size_t n_shapes, std::size_t n_pairs, const PairSpec& spec) {
  std::vector<std::string> names;
  std::vector<PointCloud> clouds;
  for (auto& s : builtin_shapes(n_shapes, spec.n_points, spec.seed)) {
    names.push_back(s.name);
    clouds.push_back(std::move(s.cloud));
  }
  return make_dataset(std::move(names), std::move(clouds), spec, n_pairs);
}

/// Every .off/.ply/.xyz file in `dir` (sorted by name) loaded to
/// spec.n_points points.
inline std::pair<std::vector<std::string>, std::vector<PointCloud>> load_shape_directory(
    const std::filesystem::path& dir, const PairSpec& spec) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: '" + dir.string() + "'");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (ext == ".off" || ext == ".ply" || ext == ".xyz") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .off/.ply/.xyz files in '" + dir.string() + "'");
  std::vector<std::string> names;
  std::vector<PointCloud> clouds;
  const Rng root = Rng(spec.seed).split(8);
  for (std::size_t i = 0; i < files.size(); ++i) {
    Rng r = root.split(i);
    names.push_back(files[i].stem().string());
    clouds.push_back(load_point_cloud(files[i].string(), spec.n_points, r()));
  }
  return {std::move(names), std::move(clouds)};
}

inline void write_dataset(const std::filesystem::path& dir, const Dataset& d) {
  std::filesystem::create_directories(dir / "shapes");
  json manifest = {{"format", "prnet-dataset"}, {"version", 1}, {"spec", to_json(d.spec)}};
  manifest["shapes"] = d.shape_names;
  manifest["pair_count"] = d.pairs.size();
  detail::write_text(dir / "dataset.json", manifest.dump(2) + "\n");
  for (std::size_t i = 0; i < d.shapes.size(); ++i)
    detail::write_text(dir / "shapes" / (d.shape_names[i] + ".xyz"), detail::xyz_string(d.shapes[i]));
  std::ostringstream lines;
  for (std::size_t i = 0; i < d.pairs.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "pair_%05zu", i);
    const std::string src = std::string(stem) + "_source.xyz";
    const std::string tgt = std::string(stem) + "_target.xyz";
    detail::write_text(dir / src, detail::xyz_string(d.pairs[i].source));
    detail::write_text(dir / tgt, detail::xyz_string(d.pairs[i].target));
    json rec = {{"id", i},
                {"shape", d.pair_shapes[i]},
                {"source", src},
                {"target", tgt},
                {"ground_truth", to_json(d.pairs[i].ground_truth)}};
    lines << rec.dump() << "\n";
  }
  detail::write_text(dir / "pairs.jsonl", lines.str());
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset d;
  std::ifstream mf(dir / "dataset.json");
  if (!mf) throw DataError("missing dataset.json in '" + dir.string() + "'");
  try {
    const json manifest = json::parse(mf);
    from_json(manifest.at("spec"), d.spec, "spec");
    d.shape_names = manifest.at("shapes").get<std::vector<std::string>>();
    for (const auto& name : d.shape_names)
      d.shapes.push_back(detail::read_xyz_file(dir / "shapes" / (name + ".xyz")));
    std::ifstream pf(dir / "pairs.jsonl");
    if (!pf) throw DataError("missing pairs.jsonl in '" + dir.string() + "'");
    std::string line;
    while (std::getline(pf, line)) {
      if (line.empty()) continue;
      const json rec = json::parse(line);
      RegistrationPair p;
      p.source = detail::read_xyz_file(dir / rec.at("source").get<std::string>());
      p.target = detail::read_xyz_file(dir / rec.at("target").get<std::string>());
      p.ground_truth = transform_from_json(rec.at("ground_truth"));
      d.pair_shapes.push_back(rec.value("shape", std::string()));
      d.pairs.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("dataset '" + dir.string() + "': " + e.what());
  } catch (const ConfigError& e) {
    throw DataError("dataset '" + dir.string() + "': " + e.what());
  }
  return d;
}

}  // namespace prnet
