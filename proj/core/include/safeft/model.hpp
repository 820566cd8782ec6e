#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "safeft/tape.hpp"
#include "safeft/tensor.hpp"

namespace safeft {

/// Raised when a configuration value is out of its documented range. The
/// message starts with the dotted field path.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 64;
  std::size_t max_seq = 32;
  std::size_t n_classes = 2;
  std::size_t lora_rank = 4;
  double lora_alpha = 16.0;
  double lora_dropout = 0.1;

  double lora_scaling() const { return lora_alpha / static_cast<double>(lora_rank); }
  std::size_t head_dim() const { return d_model / n_heads; }
  /// Throws ConfigError naming the offending field under `prefix`.
  void validate(const std::string& prefix = "model") const;

  bool operator==(const ModelConfig&) const = default;
};

enum class AdapterStatus : std::uint8_t { Active = 0, Frozen = 1 };

/// Status of the LoRA pair set (query and value) attached to one layer.
struct AdapterState {
  AdapterStatus status = AdapterStatus::Active;
  std::optional<int> freeze_epoch;

  bool frozen() const noexcept { return status == AdapterStatus::Frozen; }
  bool operator==(const AdapterState&) const = default;
};

enum class ParamRole : std::uint8_t { Base, Adapter, Head };

struct Parameter {
  std::string name;
  std::shared_ptr<Tensor> value;
  ParamRole role;
  int layer;
};

/// Token batch, padded with id 0 to `seq` positions per example.
struct Batch {
  std::size_t size = 0;
  std::size_t seq = 0;
  std::vector<std::int64_t> tokens;
  std::vector<std::int64_t> lengths;
  std::vector<std::int64_t> labels;

  std::size_t valid_rows() const;
};

/// Adapted (X) and adapter-ablated (Y) block outputs per layer, restricted to
/// non-padding positions. Rows line up across X and Y.
struct ForwardTrace {
  std::vector<Tensor> adapted;
  std::vector<Tensor> original;
};

struct ForwardOptions {
  bool grad = true;
  bool training = true;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  /// Overrides the cut derived from adapter status (engine testing).
  std::optional<int> cut_layer;
};

struct ForwardResult {
  Tape tape;
  Var logits;
  Var loss;
};

namespace param_names {
std::string layer_prefix(int layer);
std::string lora_a(int layer, char proj);
std::string lora_b(int layer, char proj);
inline const std::string head_weight = "head.weight";
inline const std::string head_bias = "head.bias";
}  // namespace param_names

/// Post-LN transformer encoder classifier with LoRA pairs on the query and
/// value projections of every block. Base weights never train.
class Model {
 public:
  /// Base weights ~ N(0, 0.02^2), LoRA A ~ N(0, 1/d_model), LoRA B = 0,
  /// layer-norm gains 1, all biases 0.
  static Model init(const ModelConfig& config, std::uint64_t seed);

  Model clone() const;

  const ModelConfig& config() const noexcept { return config_; }
  int n_layers() const noexcept { return config_.n_layers; }

  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  const Parameter& parameter(const std::string& name) const;
  Tensor& mutable_value(const std::string& name);

  const AdapterState& adapter(int layer) const { return adapters_.at(static_cast<std::size_t>(layer)); }
  void set_adapter(int layer, AdapterState state) { adapters_.at(static_cast<std::size_t>(layer)) = state; }
  const std::vector<AdapterState>& adapters() const noexcept { return adapters_; }
  std::vector<bool> frozen_mask() const;

  /// Lowest layer whose adapter is active; n_layers when all are frozen.
  int cut_layer() const;

  std::vector<std::string> adapter_parameter_names(int layer) const;
  std::size_t adapter_parameter_count(int layer) const;
  std::size_t head_parameter_count() const;
  /// Names of parameters the optimizer should hold: active adapters and the head.
  std::vector<std::string> trainable_parameter_names() const;
  std::size_t parameter_bytes() const;

  /// Full training or evaluation pass. The tape cut sits at cut_layer()
  /// unless overridden.
  ForwardResult forward(const Batch& batch, const ForwardOptions& options) const;

  /// Gradient-free, dropout-free probe pass capturing X_i and Y_i per layer,
  /// where Y_i skips only layer i's adapter contribution.
  ForwardTrace dual_forward(const Batch& batch) const;

  /// scaling * (h A) B for one projection of `layer`'s adapter, evaluated on
  /// the adapted input h of that block (all positions, no dropout).
  Tensor adapter_contribution(const Batch& batch, int layer, char proj) const;

  /// Adapted block outputs only (valid rows), no tape retention.
  std::vector<Tensor> layer_outputs(const Batch& batch) const;

 private:
  Model() = default;

  Var embed(Tape& tape, const Batch& batch) const;
  Var block(Tape& tape, const Var& h, int layer, const Batch& batch, const Var& mask, bool with_adapter) const;
  Var head(Tape& tape, const Var& h, const Batch& batch) const;
  Var param(Tape& tape, const std::string& name) const;
  Var attention_mask(Tape& tape, const Batch& batch) const;
  Tensor valid_rows(const Tensor& h, const Batch& batch) const;
  void check_batch(const Batch& batch) const;

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::vector<AdapterState> adapters_;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t examples = 0;
};

/// Dropout-free, gradient-free pass over `batches`; loss is the
/// example-weighted mean of per-batch losses.
EvalResult evaluate(const Model& model, std::span<const Batch> batches);

}  // namespace safeft
