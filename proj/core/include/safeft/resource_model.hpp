#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "safeft/model.hpp"

namespace safeft {

/// Per-step cost of one training step, composed from the op table.
struct StepCost {
  std::size_t activation_bytes = 0;
  std::uint64_t forward_flops = 0;
  std::uint64_t backward_flops = 0;
};

/// Analytic cost of a training step at the given frozen mask. Walks the same
/// op sequence the model records and sums table entries; layers below the
/// cut contribute activations of zero and no backward work.
StepCost step_cost(const ModelConfig& config, const std::vector<bool>& frozen_mask, std::size_t batch,
                   std::size_t seq, bool training = true);

std::size_t modeled_activation_bytes(const ModelConfig& config, const std::vector<bool>& frozen_mask,
                                     std::size_t batch, std::size_t seq);

struct FlopCount {
  std::uint64_t forward = 0;
  std::uint64_t backward = 0;
};
FlopCount flops_per_step(const ModelConfig& config, const std::vector<bool>& frozen_mask, std::size_t batch,
                         std::size_t seq);

/// Lowest unfrozen layer, or n_layers when every adapter is frozen.
int cut_from_mask(const std::vector<bool>& frozen_mask);

std::size_t trainable_parameter_count(const ModelConfig& config, const std::vector<bool>& frozen_mask);

struct ResourceReport {
  int epoch = 0;
  int cut_layer = 0;
  std::size_t activation_bytes = 0;
  /// Two f64 moment buffers per trainable parameter.
  std::size_t optimizer_bytes = 0;
  /// One f64 gradient buffer per trainable parameter.
  std::size_t gradient_bytes = 0;
  std::size_t parameter_bytes = 0;
  std::size_t trainable_parameter_count = 0;
  std::uint64_t forward_flops = 0;
  std::uint64_t backward_flops = 0;

  bool operator==(const ResourceReport&) const = default;
};

ResourceReport epoch_report(int epoch, const Model& model, std::size_t batch, std::size_t seq);

}  // namespace safeft
