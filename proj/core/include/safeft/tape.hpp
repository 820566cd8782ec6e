#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "safeft/op_table.hpp"
#include "safeft/tensor.hpp"

namespace safeft {

using NodeId = std::int32_t;
using GradMap = std::map<std::string, Tensor>;

/// Layer tag for nodes that precede the first transformer block.
inline constexpr int kInputLayer = -1;

struct TapeOptions {
  bool grad_enabled = true;
  /// Nodes tagged with a layer below this index never require gradients and
  /// retain nothing, regardless of the trainability of their inputs.
  int cut_layer = 0;
  /// Enables dropout.
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

/// Handle to a recorded value. The tape holds only what backward needs; the
/// value itself lives as long as some Var or saved reference points at it.
struct Var {
  NodeId id = -1;
  std::shared_ptr<const Tensor> value;
  bool requires_grad = false;

  const Tensor& tensor() const { return *value; }
  const Shape& shape() const { return value->shape(); }
};

/// Read-only view of a recorded node, for tests and accounting.
struct NodeInfo {
  OpKind kind;
  std::vector<NodeId> parents;
  int layer;
  bool requires_grad;
  bool retained;
};

/// Define-by-run operation tape. Rebuilt every step.
class Tape {
 public:
  explicit Tape(TapeOptions options = {});
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept;
  Tape& operator=(Tape&&) noexcept;
  ~Tape();

  void set_layer(int layer) { layer_ = layer; }
  int layer() const noexcept { return layer_; }
  const TapeOptions& options() const noexcept { return options_; }

  /// Leaf that aliases parameter storage. Trainable parameters tagged at or
  /// above the cut receive an entry in the gradient map under `name`.
  Var parameter(std::string name, std::shared_ptr<const Tensor> value, bool trainable);
  Var constant(Tensor value);

  Var matmul(const Var& a, const Var& b);
  Var add(const Var& a, const Var& b);
  Var add_bias(const Var& x, const Var& bias);
  Var scale(const Var& x, double factor);
  Var transpose(const Var& x);
  Var row_softmax(const Var& x);
  Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
  Var gelu(const Var& x);
  Var embedding(const Var& table, std::span<const std::int64_t> ids);
  Var cross_entropy_mean(const Var& logits, std::span<const std::int64_t> labels);
  Var dropout(const Var& x, double p);
  /// (batch*seq, heads*head_dim) -> (batch*heads, seq, head_dim)
  Var split_heads(const Var& x, std::size_t batch, std::size_t seq, std::size_t heads);
  /// Inverse of split_heads.
  Var merge_heads(const Var& x, std::size_t batch, std::size_t seq, std::size_t heads);
  /// Mean over the first lengths[b] rows of each seq-row group.
  Var mean_pool(const Var& x, std::span<const std::int64_t> lengths, std::size_t seq);

  /// Reverse sweep from a scalar. Consumes the saved activations; a tape can
  /// be differentiated once.
  GradMap backward(const Var& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  NodeInfo node(NodeId id) const;

  /// Bytes of non-parameter buffers currently referenced for backward.
  std::size_t retained_bytes() const;
  std::uint64_t forward_flops() const noexcept { return forward_flops_; }
  std::uint64_t backward_flops() const noexcept { return backward_flops_; }

 private:
  struct Node;

  Var record(OpKind kind, std::vector<const Var*> inputs, Tensor out, const OpGeometry& geo);
  bool tagged_below_cut() const noexcept { return layer_ < options_.cut_layer; }

  TapeOptions options_;
  int layer_ = kInputLayer;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::unordered_set<const Tensor*> parameters_;
  std::uint64_t forward_flops_ = 0;
  std::uint64_t backward_flops_ = 0;
  bool consumed_ = false;
};

}  // namespace safeft
