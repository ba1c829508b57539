// Closed-form rigid alignment from hard or soft correspondences.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "prnet/geometry.hpp"

namespace prnet {

/// Row-wise correspondence from source rows to target rows.
struct Matching {
  enum class Mode { kHard, kSoft };

  Mode mode = Mode::kHard;
  std::vector<std::size_t> hard_targets;
  /// Soft mode: rows() == source count, cols() == target count.
  Eigen::MatrixXd weights;
  std::size_t target_count = 0;

  static Matching hard(std::vector<std::size_t> targets, std::size_t target_count) {
    Matching m;
    m.mode = Mode::kHard;
    m.hard_targets = std::move(targets);
    m.target_count = target_count;
    return m;
  }

  static Matching soft(Eigen::MatrixXd w) {
    Matching m;
    m.mode = Mode::kSoft;
    m.target_count = static_cast<std::size_t>(w.cols());
    m.weights = std::move(w);
    return m;
  }

  static Matching identity(std::size_t n) {
    std::vector<std::size_t> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = i;
    return hard(std::move(t), n);
  }

  [[nodiscard]] std::size_t rows() const {
    return mode == Mode::kHard ? hard_targets.size() : static_cast<std::size_t>(weights.rows());
  }

  [[nodiscard]] bool valid(double tol = 1e-9) const {
    if (mode == Mode::kHard) {
      return std::all_of(hard_targets.begin(), hard_targets.end(),
                         [&](std::size_t j) { return j < target_count; });
    }
    if ((weights.array() < 0.0).any() || !weights.allFinite()) return false;
    for (Eigen::Index i = 0; i < weights.rows(); ++i)
      if (std::abs(weights.row(i).sum() - 1.0) > tol) return false;
    return true;
  }
};

/// u * diag(s) * v^T with s descending and non-negative.
struct Svd3 {
  Mat3 u = Mat3::Identity();
  Vec3 s = Vec3::Zero();
  Mat3 v = Mat3::Identity();
};

namespace detail {

// Cyclic Jacobi eigen-decomposition of a symmetric 3x3 matrix. On return
// `a` is (nearly) diagonal and a_in = q * diag(a) * q^T.
inline void jacobi_eigen3(Mat3& a, Mat3& q, double tol = 1e-14, int max_sweeps = 50) {
  q.setIdentity();
  const double scale = std::max(a.cwiseAbs().maxCoeff(), 1e-300);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    const double off = std::abs(a(0, 1)) + std::abs(a(0, 2)) + std::abs(a(1, 2));
    if (off <= tol * scale) return;
    for (int p = 0; p < 2; ++p)
      for (int r = p + 1; r < 3; ++r) {
        const double apr = a(p, r);
        if (apr == 0.0) continue;
        const double theta = (a(r, r) - a(p, p)) / (2.0 * apr);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < 3; ++k) {
          const double akp = a(k, p);
          const double akr = a(k, r);
          a(k, p) = c * akp - s * akr;
          a(k, r) = s * akp + c * akr;
        }
        for (int k = 0; k < 3; ++k) {
          const double apk = a(p, k);
          const double ark = a(r, k);
          a(p, k) = c * apk - s * ark;
          a(r, k) = s * apk + c * ark;
        }
        for (int k = 0; k < 3; ++k) {
          const double qkp = q(k, p);
          const double qkr = q(k, r);
          q(k, p) = c * qkp - s * qkr;
          q(k, r) = s * qkp + c * qkr;
        }
      }
  }
}

// Any unit vector orthogonal to `a`.
inline Vec3 any_orthogonal(const Vec3& a) {
  const Vec3 axis = std::abs(a.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  return a.cross(axis).normalized();
}

}  // namespace detail

/// SVD of a 3x3 matrix: V from the Jacobi eigenvectors of H^T H, U from
/// Gram-Schmidt on the columns of H V.
inline Svd3 svd3(const Mat3& h) {
  Mat3 a = h.transpose() * h;
  Mat3 q;
  detail::jacobi_eigen3(a, q);
  std::array<int, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int i, int j) { return a(i, i) > a(j, j); });
  Svd3 out;
  for (int c = 0; c < 3; ++c) out.v.col(c) = q.col(order[c]);
  if (out.v.determinant() < 0.0) out.v.col(2) = -out.v.col(2);

  const Mat3 b = h * out.v;
  const double tiny = 1e-300;
  Vec3 u0 = b.col(0);
  double n0 = u0.norm();
  u0 = n0 > tiny ? Vec3(u0 / n0) : Vec3::UnitX();
  Vec3 u1 = b.col(1) - u0.dot(b.col(1)) * u0;
  double n1 = u1.norm();
  u1 = n1 > tiny * std::max(1.0, n0) ? Vec3(u1 / n1) : detail::any_orthogonal(u0);
  Vec3 u2 = u0.cross(u1);
  out.u.col(0) = u0;
  out.u.col(1) = u1;
  out.u.col(2) = u2;
  for (int c = 0; c < 3; ++c) {
    double sc = out.u.col(c).dot(b.col(c));
    if (sc < 0.0) {
      out.u.col(c) = -out.u.col(c);
      sc = -sc;
    }
    out.s[c] = sc;
  }
  // Near-ties can leave s marginally out of order after re-projection.
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2 - i; ++j)
      if (out.s[j] < out.s[j + 1]) {
        std::swap(out.s[j], out.s[j + 1]);
        out.u.col(j).swap(out.u.col(j + 1));
        out.v.col(j).swap(out.v.col(j + 1));
      }
  return out;
}

/// Per source row: the matched target point (hard) or the weighted target
/// average (soft).
inline PointCloud mapped_targets(const Matching& matching, const PointCloud& target) {
  if (matching.target_count != target.size())
    throw DimensionMismatch("mapped_targets: matching has " +
                            std::to_string(matching.target_count) + " targets, cloud has " +
                            std::to_string(target.size()));
  PointCloud out;
  out.points.reserve(matching.rows());
  if (matching.mode == Matching::Mode::kHard) {
    for (auto j : matching.hard_targets) {
      if (j >= target.size()) throw DimensionMismatch("mapped_targets: index out of range");
      out.points.push_back(target[j]);
    }
  } else {
    for (Eigen::Index i = 0; i < matching.weights.rows(); ++i) {
      Vec3 acc = Vec3::Zero();
      for (Eigen::Index j = 0; j < matching.weights.cols(); ++j)
        acc += matching.weights(i, j) * target[static_cast<std::size_t>(j)];
      out.points.push_back(acc);
    }
  }
  return out;
}

/// H = sum_i (x_i - x_mean)(y_i - y_mean)^T.
inline Mat3 cross_covariance(const PointCloud& source, const PointCloud& mapped) {
  if (source.size() != mapped.size() || source.empty())
    throw DimensionMismatch("cross_covariance: need equal non-empty clouds");
  const Vec3 xm = source.centroid();
  const Vec3 ym = mapped.centroid();
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i)
    h += (source[i] - xm) * (mapped[i] - ym).transpose();
  return h;
}

/// V * diag(1, 1, det(V U^T)) * U^T.
inline Mat3 rotation_from_svd(const Svd3& svd) {
  const double d = (svd.v * svd.u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  return svd.v * Vec3(1.0, 1.0, d).asDiagonal() * svd.u.transpose();
}

struct ProcrustesSolution {
  RigidTransform transform;
  /// rank(H) < 2: the rotation is not uniquely determined.
  bool degenerate = false;
  /// V U^T had det -1 and the last axis was flipped.
  bool reflection_corrected = false;
  Svd3 svd;
};

inline bool rank_deficient(const Vec3& singular_values) {
  return singular_values[1] <= 1e-12 * std::max(singular_values[0], 1e-300) ||
         singular_values[0] <= 1e-300;
}

inline ProcrustesSolution solve_procrustes(const PointCloud& source, const PointCloud& target,
                                           const Matching& matching) {
  if (source.size() < 3) throw InvalidArgument("solve_procrustes: need at least 3 points");
  if (matching.rows() != source.size())
    throw DimensionMismatch("solve_procrustes: matching rows != source size");
  const PointCloud mapped = mapped_targets(matching, target);
  ProcrustesSolution sol;
  sol.svd = svd3(cross_covariance(source, mapped));
  sol.reflection_corrected = (sol.svd.v * sol.svd.u.transpose()).determinant() < 0.0;
  sol.transform.rotation = rotation_from_svd(sol.svd);
  sol.transform.translation = mapped.centroid() - sol.transform.rotation * source.centroid();
  sol.degenerate = rank_deficient(sol.svd.s);
  return sol;
}

/// E = (1/N) sum_i |R x_i + t - y_m(i)|^2.
inline double alignment_objective(const PointCloud& source, const PointCloud& target,
                                  const RigidTransform& t, const Matching& matching) {
  if (matching.rows() != source.size())
    throw DimensionMismatch("alignment_objective: matching rows != source size");
  if (source.empty()) return 0.0;
  const PointCloud mapped = mapped_targets(matching, target);
  double e = 0.0;
  for (std::size_t i = 0; i < source.size(); ++i) e += (t.apply(source[i]) - mapped[i]).squaredNorm();
  return e / static_cast<double>(source.size());
}

}  // namespace prnet
