// Point-to-point ICP: alternate nearest-neighbour matching and the
// closed-form Procrustes solve.
#pragma once

#include <chrono>

#include "prnet/kdtree.hpp"
#include "prnet/procrustes.hpp"
#include "prnet/registration.hpp"

namespace prnet {

struct IcpConfig {
  int max_iterations = 50;
  double convergence_tol = 1e-8;
  RigidTransform init;

  void validate() const {
    if (max_iterations < 1) throw InvalidArgument("IcpConfig: max_iterations must be >= 1");
    if (convergence_tol < 0.0) throw InvalidArgument("IcpConfig: convergence_tol must be >= 0");
  }
};

/// Each source row mapped to its Euclidean-nearest target row; ties go to the
/// lowest target index.
inline Matching nearest_neighbor_map(const PointCloud& source, const KdTree& tree) {
  if (tree.size() == 0) throw EmptyInput("nearest_neighbor_map: empty target");
  std::vector<std::size_t> idx;
  idx.reserve(source.size());
  for (const auto& p : source.points) idx.push_back(tree.nearest(p));
  return Matching::hard(std::move(idx), tree.size());
}

inline Matching nearest_neighbor_map(const PointCloud& source, const PointCloud& target) {
  if (target.empty()) throw EmptyInput("nearest_neighbor_map: empty target");
  return nearest_neighbor_map(source, KdTree(target.points));
}

/// Each StepRecord holds the increment applied by an iteration and the
/// objective at the updated estimate under its own nearest-neighbour map.
inline RegistrationResult icp_register(const PointCloud& source, const PointCloud& target,
                                       const IcpConfig& config = {}) {
  config.validate();
  if (source.size() < 3 || target.size() < 3)
    throw InvalidArgument("icp_register: need at least 3 points in each cloud");
  const auto start = std::chrono::steady_clock::now();
  const KdTree tree(target.points);

  RegistrationResult result;
  RigidTransform current = config.init;
  Matching matching = nearest_neighbor_map(apply_transform(current, source), tree);
  double objective = alignment_objective(source, target, current, matching);
  result.initial_objective = objective;
  for (int it = 0; it < config.max_iterations; ++it) {
    const ProcrustesSolution sol = solve_procrustes(source, target, matching);
    result.degenerate = result.degenerate || sol.degenerate;
    const RigidTransform next = sol.transform;
    Matching next_matching = nearest_neighbor_map(apply_transform(next, source), tree);
    const double next_objective = alignment_objective(source, target, next, next_matching);

    StepRecord& step = result.per_step.emplace_back();
    step.transform = compose(next, invert(current));
    step.objective = next_objective;

    const double decrease = objective - next_objective;
    current = next;
    matching = std::move(next_matching);
    objective = next_objective;
    if (decrease < config.convergence_tol) {
      result.converged = true;
      break;
    }
  }
  result.final_transform = current;
  result.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace prnet
