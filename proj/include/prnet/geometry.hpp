// Point clouds, rigid motions, synthetic partial pairs, and registration
// metrics.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prnet/errors.hpp"
#include "prnet/rng.hpp"

namespace prnet {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

struct PointCloud {
  std::vector<Vec3> points;
  /// Provenance: index of each point in the cloud it was drawn from.
  std::optional<std::vector<std::size_t>> source_indices;

  [[nodiscard]] std::size_t size() const { return points.size(); }
  [[nodiscard]] bool empty() const { return points.empty(); }
  const Vec3& operator[](std::size_t i) const { return points[i]; }
  Vec3& operator[](std::size_t i) { return points[i]; }

  [[nodiscard]] Vec3 centroid() const {
    Vec3 c = Vec3::Zero();
    for (const auto& p : points) c += p;
    return points.empty() ? c : Vec3(c / static_cast<double>(points.size()));
  }

  /// Checks finiteness and provenance consistency.
  [[nodiscard]] bool valid() const {
    for (const auto& p : points)
      if (!p.allFinite()) return false;
    if (source_indices) {
      if (source_indices->size() != points.size()) return false;
      std::vector<std::size_t> sorted = *source_indices;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) return false;
    }
    return true;
  }
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  [[nodiscard]] Vec3 apply(const Vec3& x) const { return rotation * x + translation; }

  /// Orthonormality and det = +1 within `tol`.
  [[nodiscard]] bool valid(double tol = 1e-9) const {
    if (!rotation.allFinite() || !translation.allFinite()) return false;
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).norm();
    return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
  }
};

inline Mat3 rot_x(double rad) {
  return Eigen::AngleAxisd(rad, Vec3::UnitX()).toRotationMatrix();
}
inline Mat3 rot_y(double rad) {
  return Eigen::AngleAxisd(rad, Vec3::UnitY()).toRotationMatrix();
}
inline Mat3 rot_z(double rad) {
  return Eigen::AngleAxisd(rad, Vec3::UnitZ()).toRotationMatrix();
}

/// R = Rz(z) * Ry(y) * Rx(x), angles in degrees.
inline Mat3 rotation_from_euler_zyx(double z_deg, double y_deg, double x_deg) {
  return rot_z(deg2rad(z_deg)) * rot_y(deg2rad(y_deg)) * rot_x(deg2rad(x_deg));
}

struct EulerZYX {
  /// (z, y, x) in degrees; R = Rz(z) * Ry(y) * Rx(x).
  std::array<double, 3> degrees{0.0, 0.0, 0.0};
  /// |pitch| at 90 degrees; z and x are then coupled and x is set to 0.
  bool gimbal_lock = false;
};

inline EulerZYX euler_from_rotation(const Mat3& r) {
  EulerZYX out;
  const double s = std::clamp(-r(2, 0), -1.0, 1.0);
  const double pitch = std::asin(s);
  if (std::abs(s) > 1.0 - 1e-12) {
    out.gimbal_lock = true;
    // R = Rz(z)Ry(+-90)Rx(x) depends only on z -+ x; pin x = 0.
    const double yaw = std::atan2(-r(0, 1), r(1, 1));
    out.degrees = {rad2deg(yaw), rad2deg(pitch), 0.0};
    return out;
  }
  const double yaw = std::atan2(r(1, 0), r(0, 0));
  const double roll = std::atan2(r(2, 1), r(2, 2));
  out.degrees = {rad2deg(yaw), rad2deg(pitch), rad2deg(roll)};
  return out;
}

/// Per-axis angles uniform in [0, rot_range_deg] composed as Rz*Ry*Rx;
/// translation uniform in [-trans_range, trans_range]^3.
inline RigidTransform random_rigid(double rot_range_deg, double trans_range, Rng rng) {
  if (rot_range_deg < 0.0 || trans_range < 0.0)
    throw InvalidArgument("random_rigid: ranges must be non-negative");
  const double ax = rng.uniform(0.0, 1.0) * rot_range_deg;
  const double ay = rng.uniform(0.0, 1.0) * rot_range_deg;
  const double az = rng.uniform(0.0, 1.0) * rot_range_deg;
  RigidTransform t;
  t.rotation = rotation_from_euler_zyx(az, ay, ax);
  for (int i = 0; i < 3; ++i) t.translation[i] = rng.uniform(-1.0, 1.0) * trans_range;
  return t;
}

inline PointCloud apply_transform(const RigidTransform& t, const PointCloud& cloud) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(t.apply(p));
  out.source_indices = cloud.source_indices;
  return out;
}

/// The transform x -> second(first(x)).
inline RigidTransform compose(const RigidTransform& second, const RigidTransform& first) {
  RigidTransform out;
  out.rotation = second.rotation * first.rotation;
  out.translation = second.rotation * first.translation + second.translation;
  return out;
}

inline RigidTransform invert(const RigidTransform& t) {
  RigidTransform out;
  out.rotation = t.rotation.transpose();
  out.translation = -(out.rotation * t.translation);
  return out;
}

/// Residual motion still needed after `accumulated` has been applied, so that
/// compose(result, accumulated) == total.
inline RigidTransform local_ground_truth(const RigidTransform& total,
                                         const RigidTransform& accumulated) {
  RigidTransform out;
  out.rotation = total.rotation * accumulated.rotation.transpose();
  out.translation = total.translation - out.rotation * accumulated.translation;
  return out;
}

/// Greedy farthest-point sampling. The first pick is uniform under `rng`;
/// ties on the max-min distance go to the lowest index. source_indices of
/// the result index into `cloud`.
inline PointCloud farthest_point_sample(const PointCloud& cloud, std::size_t n, Rng rng) {
  if (n > cloud.size())
    throw TooFewPoints("farthest_point_sample: requested " + std::to_string(n) + " of " +
                       std::to_string(cloud.size()) + " points");
  PointCloud out;
  std::vector<std::size_t> chosen;
  chosen.reserve(n);
  if (n > 0) {
    std::vector<double> min_d2(cloud.size(), std::numeric_limits<double>::infinity());
    std::size_t next = static_cast<std::size_t>(rng.below(cloud.size()));
    for (std::size_t s = 0; s < n; ++s) {
      chosen.push_back(next);
      min_d2[next] = -1.0;
      const Vec3& c = cloud[next];
      double best = -1.0;
      std::size_t best_i = 0;
      for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (min_d2[i] < 0.0) continue;
        min_d2[i] = std::min(min_d2[i], (cloud[i] - c).squaredNorm());
        if (min_d2[i] > best) {
          best = min_d2[i];
          best_i = i;
        }
      }
      next = best_i;
    }
  }
  out.points.reserve(n);
  for (auto i : chosen) out.points.push_back(cloud[i]);
  out.source_indices = std::move(chosen);
  return out;
}

/// The n nearest points of `cloud` to `viewpoint`, in their original order.
inline PointCloud partial_view_from(const PointCloud& cloud, std::size_t n, const Vec3& viewpoint) {
  if (n > cloud.size())
    throw TooFewPoints("partial_view: requested " + std::to_string(n) + " of " +
                       std::to_string(cloud.size()) + " points");
  std::vector<std::size_t> order(cloud.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> d2(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) d2[i] = (cloud[i] - viewpoint).squaredNorm();
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return d2[a] < d2[b] || (d2[a] == d2[b] && a < b);
                   });
  order.resize(n);
  std::sort(order.begin(), order.end());
  PointCloud out;
  out.points.reserve(n);
  for (auto i : order) out.points.push_back(cloud[i]);
  out.source_indices = std::move(order);
  return out;
}

/// Viewpoint uniform on the sphere of radius `radius` around the centroid.
inline Vec3 random_viewpoint(const PointCloud& cloud, Rng rng, double radius = 2.0) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec3 dir;
  do {
    dir = Vec3(normal(rng), normal(rng), normal(rng));
  } while (dir.norm() < 1e-12);
  return cloud.centroid() + radius * dir.normalized();
}

inline PointCloud partial_view(const PointCloud& cloud, std::size_t n_partial, Rng rng) {
  if (n_partial > cloud.size())
    throw TooFewPoints("partial_view: requested " + std::to_string(n_partial) + " of " +
                       std::to_string(cloud.size()) + " points");
  return partial_view_from(cloud, n_partial, random_viewpoint(cloud, rng));
}

/// Independent N(0, sigma^2) perturbation per coordinate, clamped to
/// [-clip, clip].
inline PointCloud add_noise(const PointCloud& cloud, double sigma, double clip, Rng rng) {
  if (sigma < 0.0 || clip < 0.0) throw InvalidArgument("add_noise: sigma and clip must be >= 0");
  PointCloud out = cloud;
  if (sigma == 0.0) return out;
  std::normal_distribution<double> normal(0.0, sigma);
  for (auto& p : out.points)
    for (int k = 0; k < 3; ++k) p[k] += std::clamp(normal(rng), -clip, clip);
  return out;
}

struct PairSpec {
  std::size_t n_points = 1024;
  std::size_t n_partial = 768;
  double rot_range_deg = 45.0;
  double trans_range = 0.5;
  double noise_sigma = 0.0;
  double noise_clip = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_partial == 0 || n_partial > n_points)
      throw InvalidArgument("PairSpec: require 0 < n_partial <= n_points");
    if (rot_range_deg < 0.0 || trans_range < 0.0 || noise_sigma < 0.0 || noise_clip < 0.0)
      throw InvalidArgument("PairSpec: ranges must be non-negative");
  }
};

struct RegistrationPair {
  PointCloud source;
  PointCloud target;
  RigidTransform ground_truth;
  /// Un-noised, uncropped clouds the partial views were cut from.
  PointCloud full_source;
  PointCloud full_target;
};

/// Streams consumed by make_pair, split from Rng(spec.seed).
enum class PairStream : std::uint64_t { kSample = 1, kMotion, kViewSource, kViewTarget, kNoiseSource, kNoiseTarget };

inline RegistrationPair make_pair(const PointCloud& shape, const PairSpec& spec) {
  spec.validate();
  if (shape.size() < spec.n_points)
    throw TooFewPoints("make_pair: shape has " + std::to_string(shape.size()) + " points, need " +
                       std::to_string(spec.n_points));
  const Rng root(spec.seed);
  auto stream = [&](PairStream s) { return root.split(static_cast<std::uint64_t>(s)); };

  RegistrationPair pair;
  pair.full_source = farthest_point_sample(shape, spec.n_points, stream(PairStream::kSample));
  pair.ground_truth =
      random_rigid(spec.rot_range_deg, spec.trans_range, stream(PairStream::kMotion));
  pair.full_target = apply_transform(pair.ground_truth, pair.full_source);
  pair.source = add_noise(
      partial_view(pair.full_source, spec.n_partial, stream(PairStream::kViewSource)),
      spec.noise_sigma, spec.noise_clip, stream(PairStream::kNoiseSource));
  pair.target = add_noise(
      partial_view(pair.full_target, spec.n_partial, stream(PairStream::kViewTarget)),
      spec.noise_sigma, spec.noise_clip, stream(PairStream::kNoiseTarget));
  return pair;
}

/// Centers at the centroid and scales to unit max-norm.
inline PointCloud normalize_unit(PointCloud cloud) {
  const Vec3 c = cloud.centroid();
  double max_norm = 0.0;
  for (auto& p : cloud.points) {
    p -= c;
    max_norm = std::max(max_norm, p.norm());
  }
  if (max_norm > 0.0)
    for (auto& p : cloud.points) p /= max_norm;
  return cloud;
}

// ---------------------------------------------------------------------------
// Metrics

struct QuantityMetrics {
  double mse = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
  double r2 = 1.0;
};

struct MetricsReport {
  QuantityMetrics rotation;     // Euler angles, degrees
  QuantityMetrics translation;  // model units
  std::size_t count = 0;
  /// True when a quantity had zero truth variance (R^2 then 1 or -inf).
  bool degenerate_variance = false;
};

namespace detail {

inline QuantityMetrics pooled_metrics(const std::vector<double>& pred,
                                      const std::vector<double>& truth, bool& degenerate) {
  QuantityMetrics m;
  const auto n = static_cast<double>(truth.size());
  double mean = 0.0;
  for (double v : truth) mean += v;
  mean /= n;
  double ss_res = 0.0;
  double ss_tot = 0.0;
  double abs_sum = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double e = pred[i] - truth[i];
    ss_res += e * e;
    abs_sum += std::abs(e);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  m.mse = ss_res / n;
  m.rmse = std::sqrt(m.mse);
  m.mae = abs_sum / n;
  if (ss_tot == 0.0) {
    degenerate = true;
    m.r2 = ss_res == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
  } else {
    m.r2 = 1.0 - ss_res / ss_tot;
  }
  return m;
}

}  // namespace detail

/// Pooled MSE/RMSE/MAE/R^2 over all Euler angles (degrees) and all
/// translation components.
inline MetricsReport compute_metrics(const std::vector<RigidTransform>& predictions,
                                     const std::vector<RigidTransform>& truths) {
  if (predictions.empty() || truths.empty()) throw EmptyInput("compute_metrics: empty input");
  if (predictions.size() != truths.size())
    throw DimensionMismatch("compute_metrics: prediction/truth count mismatch");
  std::vector<double> pr, tr, pt, tt;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const auto ep = euler_from_rotation(predictions[i].rotation).degrees;
    const auto et = euler_from_rotation(truths[i].rotation).degrees;
    for (int k = 0; k < 3; ++k) {
      pr.push_back(ep[k]);
      tr.push_back(et[k]);
      pt.push_back(predictions[i].translation[k]);
      tt.push_back(truths[i].translation[k]);
    }
  }
  MetricsReport report;
  report.count = truths.size();
  report.rotation = detail::pooled_metrics(pr, tr, report.degenerate_variance);
  report.translation = detail::pooled_metrics(pt, tt, report.degenerate_variance);
  return report;
}

}  // namespace prnet
