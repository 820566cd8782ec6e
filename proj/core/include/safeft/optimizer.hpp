#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <string>

#include "safeft/tape.hpp"
#include "safeft/tensor.hpp"

namespace safeft {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// AdamW with decoupled weight decay. Moment buffers exist only for the
/// parameters currently registered as trainable.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {});

  /// Registers a trainable parameter. The optimizer updates `param` in place.
  void add_parameter(const std::string& name, std::shared_ptr<Tensor> param);
  /// Drops a parameter and its moment buffers (used when an adapter freezes).
  void remove_parameter(const std::string& name);
  bool has_parameter(const std::string& name) const { return slots_.count(name) > 0; }

  /// One update. Every key in `grads` must name a registered parameter;
  /// registered parameters absent from `grads` see only weight decay.
  void step(const GradMap& grads);

  std::uint64_t step_count() const noexcept { return steps_; }
  const AdamWConfig& config() const noexcept { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

  std::size_t parameter_count() const;
  /// Bytes held in the first and second moment buffers.
  std::size_t moment_bytes() const;

 private:
  struct Slot {
    std::shared_ptr<Tensor> param;
    Tensor m;
    Tensor v;
  };
  AdamWConfig config_;
  std::map<std::string, Slot> slots_;
  std::uint64_t steps_ = 0;
};

}  // namespace safeft
