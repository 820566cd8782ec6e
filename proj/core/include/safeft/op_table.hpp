#pragma once

// Per-primitive retention and FLOP table. The tape consults it to decide what
// each node keeps for backward, and the resource model composes the same
// entries analytically, so engine retention and the byte model cannot drift.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace safeft {

enum class OpKind : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  AddBias,
  Scale,
  Transpose,
  RowSoftmax,
  LayerNorm,
  Gelu,
  Embedding,
  CrossEntropyMean,
  Dropout,
  SplitHeads,
  MergeHeads,
  MeanPool,
};

std::string_view op_name(OpKind kind);

/// Operand geometry. MatMul uses batch/m/k/n; row-wise ops use rows/cols;
/// everything else uses elements (numel of the primary input).
struct OpGeometry {
  std::size_t batch = 1;
  std::size_t m = 0;
  std::size_t k = 0;
  std::size_t n = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t elements = 0;

  static OpGeometry matmul(std::size_t batch, std::size_t m, std::size_t k, std::size_t n) {
    return {batch, m, k, n, 0, 0, batch * m * n};
  }
  static OpGeometry rowwise(std::size_t rows, std::size_t cols) {
    return {1, 0, 0, 0, rows, cols, rows * cols};
  }
  static OpGeometry elementwise(std::size_t elements) { return {1, 0, 0, 0, 0, 0, elements}; }
};

/// What a node keeps alive for its backward pass.
struct Retention {
  std::array<bool, 3> inputs{};     // input slot i is referenced
  bool output = false;              // the node's own output is referenced
  std::size_t scratch_doubles = 0;  // fresh float buffers (normalized input, masks, probabilities)
  std::size_t scratch_ints = 0;     // integer side buffers (ids, labels, group lengths)
};

/// Per-element FLOP constants for the non-matmul primitives. Matmul costs
/// 2*m*k*n per batch entry forward and the same per input that needs a gradient.
struct FlopConstants {
  static constexpr std::uint64_t add = 1;
  static constexpr std::uint64_t bias_grad = 1;
  static constexpr std::uint64_t scale = 1;
  static constexpr std::uint64_t softmax_fwd = 5;
  static constexpr std::uint64_t softmax_bwd = 4;
  static constexpr std::uint64_t layer_norm_fwd = 8;
  static constexpr std::uint64_t layer_norm_bwd_input = 8;
  static constexpr std::uint64_t layer_norm_bwd_gamma = 2;
  static constexpr std::uint64_t layer_norm_bwd_beta = 1;
  static constexpr std::uint64_t gelu_fwd = 10;
  static constexpr std::uint64_t gelu_bwd = 10;
  static constexpr std::uint64_t embedding_bwd = 1;
  static constexpr std::uint64_t cross_entropy_fwd = 5;
  static constexpr std::uint64_t cross_entropy_bwd = 2;
  static constexpr std::uint64_t dropout = 1;
  static constexpr std::uint64_t mean_pool = 1;
};

/// Bytes per retained integer; ids, labels and lengths are held as int64.
inline constexpr std::size_t kIntBytes = 8;
inline constexpr std::size_t kFloatBytes = 8;

Retention retention(OpKind kind, const OpGeometry& geo, std::span<const bool> input_needs_grad);
std::uint64_t forward_flops(OpKind kind, const OpGeometry& geo);
std::uint64_t backward_flops(OpKind kind, const OpGeometry& geo, std::span<const bool> input_needs_grad);

}  // namespace safeft
