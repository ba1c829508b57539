// Result types shared by the ICP baseline and the learned pipeline.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "prnet/geometry.hpp"

namespace prnet {

struct AcpDiagnostics {
  double lambda = 1.0;
  std::string temperature_mode;
  std::vector<std::size_t> source_keypoints;
  std::vector<std::size_t> target_keypoints;
  /// For each source keypoint, the position in target_keypoints it matched.
  std::vector<std::size_t> matches;
  /// Mean row entropy (nats) of the smooth matching surrogate.
  double mean_entropy = 0.0;
  /// Alignment objective on the keypoints under the chosen hard matching.
  double objective = 0.0;
  bool degenerate = false;
};

struct StepRecord {
  RigidTransform transform;
  double objective = 0.0;
  std::optional<AcpDiagnostics> acp;
  /// Training-only bookkeeping for the step.
  std::optional<RigidTransform> accumulated_before;
  std::optional<RigidTransform> local_ground_truth;
  double loss = 0.0;
};

struct RegistrationResult {
  RigidTransform final_transform;
  std::vector<StepRecord> per_step;
  double elapsed_seconds = 0.0;
  /// Objective before the first iteration (ICP only).
  double initial_objective = 0.0;
  bool converged = false;
  bool degenerate = false;
};

/// Folds per-step transforms in order: T = T_P o ... o T_1.
inline RigidTransform fold_steps(const std::vector<StepRecord>& steps) {
  RigidTransform acc;
  for (const auto& s : steps) acc = compose(s.transform, acc);
  return acc;
}

}  // namespace prnet
