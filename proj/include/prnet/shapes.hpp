// Analytic procedural meshes used as a builtin shape set.
#pragma once

#include <string>
#include <vector>

#include "prnet/mesh_io.hpp"

namespace prnet {

enum class ShapeKind { kSphere, kBox, kTorus, kCylinder, kLBracket };

inline constexpr std::array<ShapeKind, 5> kAllShapeKinds{
    ShapeKind::kSphere, ShapeKind::kBox, ShapeKind::kTorus, ShapeKind::kCylinder,
    ShapeKind::kLBracket};

inline std::string shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::kSphere: return "sphere";
    case ShapeKind::kBox: return "box";
    case ShapeKind::kTorus: return "torus";
    case ShapeKind::kCylinder: return "cylinder";
    case ShapeKind::kLBracket: return "lbracket";
  }
  return "unknown";
}

namespace detail {

// Appends a (rows+1) x (cols+1) vertex grid with quads split into triangles.
template <typename F>
void append_grid(Mesh& mesh, int rows, int cols, F&& vertex_at) {
  const std::size_t base = mesh.vertices.size();
  for (int r = 0; r <= rows; ++r)
    for (int c = 0; c <= cols; ++c) mesh.vertices.push_back(vertex_at(r, c));
  auto id = [&](int r, int c) { return base + static_cast<std::size_t>(r * (cols + 1) + c); };
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      mesh.triangles.push_back({id(r, c), id(r + 1, c), id(r + 1, c + 1)});
      mesh.triangles.push_back({id(r, c), id(r + 1, c + 1), id(r, c + 1)});
    }
}

inline void append_box(Mesh& mesh, const Vec3& lo, const Vec3& hi) {
  for (int axis = 0; axis < 3; ++axis)
    for (int side = 0; side < 2; ++side) {
      const int u = (axis + 1) % 3;
      const int v = (axis + 2) % 3;
      append_grid(mesh, 1, 1, [&](int r, int c) {
        Vec3 p;
        p[axis] = side ? hi[axis] : lo[axis];
        p[u] = r ? hi[u] : lo[u];
        p[v] = c ? hi[v] : lo[v];
        return p;
      });
    }
}

}  // namespace detail

/// A triangle mesh of the given kind. `rng` perturbs proportions so that
/// repeated draws give distinct, generally asymmetric shapes.
inline Mesh builtin_mesh(ShapeKind kind, Rng rng) {
  Mesh mesh;
  auto jitter = [&](double lo, double hi) { return rng.uniform(lo, hi); };
  constexpr int kRes = 24;
  switch (kind) {
    case ShapeKind::kSphere: {
      // Ellipsoid with a dent so that no axis is a symmetry axis.
      const Vec3 radii(jitter(0.6, 1.0), jitter(0.4, 0.8), jitter(0.25, 0.6));
      const double bump = jitter(0.1, 0.3);
      detail::append_grid(mesh, kRes, 2 * kRes, [&](int r, int c) {
        const double theta = kPi * r / kRes;
        const double phi = 2.0 * kPi * c / (2 * kRes);
        const Vec3 n(std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi),
                     std::cos(theta));
        const double scale = 1.0 + bump * std::max(0.0, n.x() + n.y() + n.z()) / std::sqrt(3.0);
        return Vec3(radii.cwiseProduct(n) * scale);
      });
      break;
    }
    case ShapeKind::kBox: {
      const Vec3 half(jitter(0.5, 1.0), jitter(0.3, 0.7), jitter(0.1, 0.4));
      detail::append_box(mesh, -half, half);
      // A smaller block on one corner breaks the box symmetry.
      const Vec3 lo(half.x() * 0.2, half.y() * 0.1, half.z());
      const Vec3 hi(half.x(), half.y(), half.z() + jitter(0.2, 0.5));
      detail::append_box(mesh, lo, hi);
      break;
    }
    case ShapeKind::kTorus: {
      const double major = jitter(0.6, 0.9);
      const double minor = jitter(0.15, 0.35);
      const double squash = jitter(0.5, 0.9);
      const double twist = jitter(0.2, 0.5);
      detail::append_grid(mesh, kRes, 2 * kRes, [&](int r, int c) {
        const double u = 2.0 * kPi * c / (2 * kRes);
        const double v = 2.0 * kPi * r / kRes;
        const double rad = minor * (1.0 + twist * std::cos(u) * 0.5);
        return Vec3((major + rad * std::cos(v)) * std::cos(u),
                    squash * (major + rad * std::cos(v)) * std::sin(u), rad * std::sin(v));
      });
      break;
    }
    case ShapeKind::kCylinder: {
      const double radius_x = jitter(0.3, 0.6);
      const double radius_y = jitter(0.2, 0.5);
      const double height = jitter(0.8, 1.6);
      const double taper = jitter(0.4, 0.9);
      auto ring = [&](double z, double phi) {
        const double s = 1.0 - (1.0 - taper) * (z / height + 0.5);
        return Vec3(s * radius_x * std::cos(phi), s * radius_y * std::sin(phi), z);
      };
      detail::append_grid(mesh, kRes / 2, 2 * kRes, [&](int r, int c) {
        const double z = -0.5 * height + height * r / (kRes / 2);
        return ring(z, 2.0 * kPi * c / (2 * kRes));
      });
      for (int cap = 0; cap < 2; ++cap) {
        const double z = cap ? 0.5 * height : -0.5 * height;
        detail::append_grid(mesh, 4, 2 * kRes, [&](int r, int c) {
          return Vec3(ring(z, 2.0 * kPi * c / (2 * kRes)).cwiseProduct(Vec3(r / 4.0, r / 4.0, 1.0)));
        });
      }
      break;
    }
    case ShapeKind::kLBracket: {
      const double len_a = jitter(0.8, 1.4);
      const double len_b = jitter(0.5, 1.0);
      const double thick = jitter(0.12, 0.25);
      const double depth = jitter(0.3, 0.7);
      detail::append_box(mesh, Vec3(0, 0, 0), Vec3(len_a, thick, depth));
      detail::append_box(mesh, Vec3(0, thick, 0), Vec3(thick, len_b, depth));
      // Gusset plate on one side only.
      detail::append_box(mesh, Vec3(thick, thick, 0), Vec3(thick + 0.3 * len_b, thick + 0.3 * len_b, 0.05));
      break;
    }
  }
  return mesh;
}

struct BuiltinShape {
  std::string name;
  PointCloud cloud;
};

/// `count` normalized shapes cycling through all kinds; shape i uses stream
/// i of `seed`. Each cloud holds `n_points` points.
inline std::vector<BuiltinShape> builtin_shapes(std::size_t count, std::size_t n_points,
                                                std::uint64_t seed) {
  std::vector<BuiltinShape> shapes;
  shapes.reserve(count);
  const Rng root(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const ShapeKind kind = kAllShapeKinds[i % kAllShapeKinds.size()];
    const Rng stream = root.split(i);
    Mesh mesh = builtin_mesh(kind, stream.split(0));
    shapes.push_back({shape_name(kind) + "_" + std::to_string(i),
                      point_cloud_from_mesh(mesh, n_points, stream.split(1))});
  }
  return shapes;
}

}  // namespace prnet
