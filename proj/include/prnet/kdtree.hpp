// Exact nearest-neighbour search over 3D points.
#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "prnet/geometry.hpp"

namespace prnet {

/// Static 3D k-d tree. Below kBruteForceLimit points queries scan linearly.
/// Ties on distance resolve to the lowest point index in both paths.
class KdTree {
 public:
  static constexpr std::size_t kBruteForceLimit = 64;

  explicit KdTree(const std::vector<Vec3>& points) : points_(points) {
    if (points_.size() >= kBruteForceLimit) {
      index_.resize(points_.size());
      std::iota(index_.begin(), index_.end(), std::size_t{0});
      nodes_.reserve(points_.size());
      root_ = build(0, index_.size(), 0);
    }
  }

  [[nodiscard]] std::size_t nearest(const Vec3& q) const {
    if (points_.empty()) return 0;
    std::size_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    if (root_ < 0) {
      for (std::size_t i = 0; i < points_.size(); ++i) consider(q, i, best, best_d2);
    } else {
      search(root_, q, best, best_d2);
    }
    return best;
  }

  [[nodiscard]] std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    std::size_t point = 0;
    int axis = 0;
    int left = -1;
    int right = -1;
  };

  int build(std::size_t lo, std::size_t hi, int depth) {
    if (lo >= hi) return -1;
    const int axis = depth % 3;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(index_.begin() + static_cast<std::ptrdiff_t>(lo),
                     index_.begin() + static_cast<std::ptrdiff_t>(mid),
                     index_.begin() + static_cast<std::ptrdiff_t>(hi),
                     [&](std::size_t a, std::size_t b) {
                       return points_[a][axis] < points_[b][axis] ||
                              (points_[a][axis] == points_[b][axis] && a < b);
                     });
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({index_[mid], axis, -1, -1});
    const int left = build(lo, mid, depth + 1);
    const int right = build(mid + 1, hi, depth + 1);
    nodes_[static_cast<std::size_t>(id)].left = left;
    nodes_[static_cast<std::size_t>(id)].right = right;
    return id;
  }

  void consider(const Vec3& q, std::size_t i, std::size_t& best, double& best_d2) const {
    const double d2 = (points_[i] - q).squaredNorm();
    if (d2 < best_d2 || (d2 == best_d2 && i < best)) {
      best_d2 = d2;
      best = i;
    }
  }

  void search(int id, const Vec3& q, std::size_t& best, double& best_d2) const {
    if (id < 0) return;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    consider(q, n.point, best, best_d2);
    const double diff = q[n.axis] - points_[n.point][n.axis];
    const int near = diff <= 0.0 ? n.left : n.right;
    const int far = diff <= 0.0 ? n.right : n.left;
    search(near, q, best, best_d2);
    // Equal-distance candidates on the far side may carry a lower index.
    if (diff * diff <= best_d2) search(far, q, best, best_d2);
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> index_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace prnet
