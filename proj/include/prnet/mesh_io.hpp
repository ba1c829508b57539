// OFF / PLY / xyz ingestion and surface sampling.
#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "prnet/errors.hpp"
#include "prnet/geometry.hpp"

namespace prnet {

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::size_t, 3>> triangles;
};

namespace detail {

inline std::string lowercase_extension(const std::string& path) {
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return {};
  std::string ext = path.substr(dot + 1);
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext;
}

// Fan-triangulates a polygon and validates its indices.
inline void push_polygon(Mesh& mesh, const std::vector<std::size_t>& poly) {
  for (auto idx : poly)
    if (idx >= mesh.vertices.size()) throw ParseError("face references vertex out of range");
  for (std::size_t i = 1; i + 1 < poly.size(); ++i)
    mesh.triangles.push_back({poly[0], poly[i], poly[i + 1]});
}

template <typename T>
T read_token(std::istream& in, const char* what) {
  T v{};
  if (!(in >> v)) throw ParseError(std::string("unexpected end of data reading ") + what);
  return v;
}

}  // namespace detail

/// ASCII OFF. Accepts the "OFFnv nf ne" glued-header variant.
inline Mesh parse_off(std::istream& in) {
  std::string magic;
  if (!(in >> magic) || magic.rfind("OFF", 0) != 0) throw ParseError("OFF: missing header");
  // Remaining text after "OFF" on the same token is the start of the counts.
  std::string rest = magic.substr(3);
  std::stringstream counts;
  counts << rest;
  std::string line;
  std::getline(in, line);
  counts << ' ' << line;
  long nv = -1, nf = -1, ne = 0;
  if (!(counts >> nv)) {
    if (!(in >> nv)) throw ParseError("OFF: missing counts");
    if (!(in >> nf >> ne)) throw ParseError("OFF: missing counts");
  } else if (!(counts >> nf)) {
    if (!(in >> nf >> ne)) throw ParseError("OFF: missing counts");
  }
  if (nv < 0 || nf < 0) throw ParseError("OFF: negative counts");
  Mesh mesh;
  mesh.vertices.reserve(static_cast<std::size_t>(nv));
  for (long i = 0; i < nv; ++i) {
    Vec3 p;
    for (int k = 0; k < 3; ++k) p[k] = detail::read_token<double>(in, "OFF vertex");
    if (!p.allFinite()) throw ParseError("OFF: non-finite vertex");
    mesh.vertices.push_back(p);
    std::getline(in, line);
  }
  for (long f = 0; f < nf; ++f) {
    const long n = detail::read_token<long>(in, "OFF face size");
    if (n < 0) throw ParseError("OFF: negative face size");
    std::vector<std::size_t> poly;
    for (long k = 0; k < n; ++k) {
      const long idx = detail::read_token<long>(in, "OFF face index");
      if (idx < 0) throw ParseError("OFF: negative face index");
      poly.push_back(static_cast<std::size_t>(idx));
    }
    detail::push_polygon(mesh, poly);
    std::getline(in, line);
  }
  return mesh;
}

namespace detail {

enum class PlyType { kI8, kU8, kI16, kU16, kI32, kU32, kF32, kF64 };

inline PlyType ply_type(const std::string& name) {
  if (name == "char" || name == "int8") return PlyType::kI8;
  if (name == "uchar" || name == "uint8") return PlyType::kU8;
  if (name == "short" || name == "int16") return PlyType::kI16;
  if (name == "ushort" || name == "uint16") return PlyType::kU16;
  if (name == "int" || name == "int32") return PlyType::kI32;
  if (name == "uint" || name == "uint32") return PlyType::kU32;
  if (name == "float" || name == "float32") return PlyType::kF32;
  if (name == "double" || name == "float64") return PlyType::kF64;
  throw ParseError("PLY: unknown property type '" + name + "'");
}

inline std::size_t ply_size(PlyType t) {
  switch (t) {
    case PlyType::kI8:
    case PlyType::kU8: return 1;
    case PlyType::kI16:
    case PlyType::kU16: return 2;
    case PlyType::kI32:
    case PlyType::kU32:
    case PlyType::kF32: return 4;
    case PlyType::kF64: return 8;
  }
  return 0;
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw ParseError("PLY: truncated binary data");
  // Hosts are little-endian on every target this builds for.
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline double read_ply_binary(std::istream& in, PlyType t) {
  switch (t) {
    case PlyType::kI8: return read_le<std::int8_t>(in);
    case PlyType::kU8: return read_le<std::uint8_t>(in);
    case PlyType::kI16: return read_le<std::int16_t>(in);
    case PlyType::kU16: return read_le<std::uint16_t>(in);
    case PlyType::kI32: return read_le<std::int32_t>(in);
    case PlyType::kU32: return read_le<std::uint32_t>(in);
    case PlyType::kF32: return read_le<float>(in);
    case PlyType::kF64: return read_le<double>(in);
  }
  return 0.0;
}

struct PlyProperty {
  std::string name;
  PlyType type = PlyType::kF32;
  bool is_list = false;
  PlyType count_type = PlyType::kU8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
};

}  // namespace detail

/// ASCII or binary little-endian PLY; reads vertex x/y/z and face index lists.
inline Mesh parse_ply(std::istream& in) {
  using namespace detail;
  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) throw ParseError("PLY: missing magic");
  bool binary = false;
  bool have_format = false;
  std::vector<PlyElement> elements;
  while (true) {
    if (!std::getline(in, line)) throw ParseError("PLY: unterminated header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "end_header") break;
    if (key == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "ascii") binary = false;
      else if (fmt == "binary_little_endian") binary = true;
      else throw ParseError("PLY: unsupported format '" + fmt + "'");
      have_format = true;
    } else if (key == "element") {
      PlyElement e;
      long count = -1;
      if (!(ls >> e.name >> count) || count < 0) throw ParseError("PLY: malformed element line");
      e.count = static_cast<std::size_t>(count);
      elements.push_back(e);
    } else if (key == "property") {
      if (elements.empty()) throw ParseError("PLY: property before element");
      PlyProperty p;
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string ct, it;
        if (!(ls >> ct >> it >> p.name)) throw ParseError("PLY: malformed list property");
        p.is_list = true;
        p.count_type = ply_type(ct);
        p.type = ply_type(it);
      } else {
        if (!(ls >> p.name)) throw ParseError("PLY: malformed property");
        p.type = ply_type(type);
      }
      elements.back().properties.push_back(p);
    } else if (key == "comment" || key == "obj_info" || key.empty()) {
      continue;
    } else {
      throw ParseError("PLY: unknown header keyword '" + key + "'");
    }
  }
  if (!have_format) throw ParseError("PLY: missing format line");

  Mesh mesh;
  auto scalar = [&](PlyType t) -> double {
    if (binary) return read_ply_binary(in, t);
    return read_token<double>(in, "PLY value");
  };
  for (const auto& e : elements) {
    const bool is_vertex = e.name == "vertex";
    const bool is_face = e.name == "face";
    for (std::size_t r = 0; r < e.count; ++r) {
      Vec3 p = Vec3::Zero();
      int have_xyz = 0;
      for (const auto& prop : e.properties) {
        if (prop.is_list) {
          const double n = scalar(prop.count_type);
          if (n < 0 || n != std::floor(n)) throw ParseError("PLY: bad list length");
          std::vector<std::size_t> poly;
          for (long k = 0; k < static_cast<long>(n); ++k) {
            const double idx = scalar(prop.type);
            if (idx < 0) throw ParseError("PLY: negative face index");
            poly.push_back(static_cast<std::size_t>(idx));
          }
          if (is_face && (prop.name == "vertex_indices" || prop.name == "vertex_index"))
            push_polygon(mesh, poly);
        } else {
          const double v = scalar(prop.type);
          if (is_vertex) {
            if (prop.name == "x") { p[0] = v; have_xyz |= 1; }
            else if (prop.name == "y") { p[1] = v; have_xyz |= 2; }
            else if (prop.name == "z") { p[2] = v; have_xyz |= 4; }
          }
        }
      }
      if (is_vertex) {
        if (have_xyz != 7) throw ParseError("PLY: vertex element lacks x/y/z");
        if (!p.allFinite()) throw ParseError("PLY: non-finite vertex");
        mesh.vertices.push_back(p);
      }
    }
  }
  return mesh;
}

/// One "x y z" triple per line.
inline PointCloud read_xyz(std::istream& in) {
  PointCloud cloud;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Vec3 p;
    if (!(ls >> p[0] >> p[1] >> p[2])) throw ParseError("xyz: malformed line '" + line + "'");
    if (!p.allFinite()) throw ParseError("xyz: non-finite coordinate");
    cloud.points.push_back(p);
  }
  return cloud;
}

inline void write_xyz(std::ostream& out, const PointCloud& cloud) {
  out << std::setprecision(17);
  for (const auto& p : cloud.points) out << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
}

inline Mesh read_mesh_file(const std::string& path) {
  const std::string ext = detail::lowercase_extension(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  if (ext == "off") return parse_off(in);
  if (ext == "ply") return parse_ply(in);
  if (ext == "xyz") return Mesh{read_xyz(in).points, {}};
  throw ParseError("unsupported file extension '" + ext + "' for '" + path + "'");
}

/// Area-weighted uniform samples on the mesh surface.
inline PointCloud sample_surface(const Mesh& mesh, std::size_t count, Rng rng) {
  if (mesh.triangles.empty()) throw TooFewPoints("sample_surface: mesh has no faces");
  std::vector<double> cumulative;
  cumulative.reserve(mesh.triangles.size());
  double total = 0.0;
  for (const auto& t : mesh.triangles) {
    const Vec3& a = mesh.vertices[t[0]];
    const Vec3& b = mesh.vertices[t[1]];
    const Vec3& c = mesh.vertices[t[2]];
    total += 0.5 * (b - a).cross(c - a).norm();
    cumulative.push_back(total);
  }
  if (!(total > 0.0)) throw TooFewPoints("sample_surface: mesh has zero area");
  PointCloud out;
  out.points.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double r = rng.uniform() * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    if (it == cumulative.end()) --it;
    const auto& t = mesh.triangles[static_cast<std::size_t>(it - cumulative.begin())];
    double u = rng.uniform();
    double v = rng.uniform();
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    const Vec3& a = mesh.vertices[t[0]];
    out.points.push_back(a + u * (mesh.vertices[t[1]] - a) + v * (mesh.vertices[t[2]] - a));
  }
  return out;
}

/// Meshes: 4*n_points area samples reduced by FPS. Point sets: FPS when
/// larger than n_points. The result is centered and scaled to unit max-norm.
inline PointCloud point_cloud_from_mesh(const Mesh& mesh, std::size_t n_points, Rng rng) {
  PointCloud candidates;
  if (!mesh.triangles.empty()) {
    candidates = sample_surface(mesh, 4 * n_points, rng.split(1));
  } else {
    if (mesh.vertices.size() < n_points)
      throw TooFewPoints("point set has " + std::to_string(mesh.vertices.size()) +
                         " points, need " + std::to_string(n_points));
    candidates.points = mesh.vertices;
  }
  PointCloud reduced = candidates.size() > n_points
                           ? farthest_point_sample(candidates, n_points, rng.split(2))
                           : candidates;
  reduced.source_indices.reset();
  return normalize_unit(std::move(reduced));
}

inline PointCloud load_point_cloud(const std::string& path, std::size_t n_points,
                                   std::uint64_t seed) {
  return point_cloud_from_mesh(read_mesh_file(path), n_points, Rng(seed));
}

}  // namespace prnet
