#pragma once

#include <optional>
#include <span>
#include <vector>

#include "safeft/model.hpp"
#include "safeft/tensor.hpp"

namespace safeft {

struct CkaOptions {
  /// Subtract per-feature means before comparing. Off gives the raw
  /// (uncentered) alignment.
  bool center = true;
};

/// Linear CKA: ||Y~^T X~||_F^2 / (||X~^T X~||_F ||Y~^T Y~||_F). Returns nullopt
/// when either matrix carries no signal after centering.
std::optional<double> cka(const Tensor& x, const Tensor& y, CkaOptions options = {});

/// 1 - CKA clamped to [0, 1]; nullopt propagates undefined similarity.
std::optional<double> importance_score(const Tensor& adapted, const Tensor& original, CkaOptions options = {});

inline constexpr double kRelativeChangeFloor = 1e-8;

/// |cur - prev| / max(prev, floor).
double relative_change(double previous, double current, double floor = kRelativeChangeFloor);

struct ImportanceRecord {
  int epoch = 0;
  std::vector<std::optional<double>> scores;
  /// Empty for the first record of a run.
  std::vector<double> relative_change;

  /// Score used for decisions: undefined similarity counts as fully important.
  double effective(std::size_t layer) const { return scores.at(layer).value_or(1.0); }
};

/// Probes every batch with dual_forward, stacks rows per layer and scores each
/// adapter. Relative change is filled in against `previous` when given.
ImportanceRecord epoch_importances(const Model& model, std::span<const Batch> probe, int epoch,
                                   const ImportanceRecord* previous = nullptr, CkaOptions options = {});

/// Stacks the rows of several matrices sharing a column count.
Tensor stack_rows(std::span<const Tensor> parts);

struct TrajectoryGrid {
  std::vector<int> epochs;
  /// similarity[e][layer]
  std::vector<std::vector<double>> similarity;
};

struct EpochModel {
  int epoch;
  const Model* model;
};

/// CKA between each epoch's adapted block outputs and the final model's on
/// the same probe set. Undefined similarity is emitted as NaN.
TrajectoryGrid trajectory_similarity(std::span<const EpochModel> checkpoints, const Model& final_model,
                                     std::span<const Batch> probe, CkaOptions options = {});

}  // namespace safeft
