#include "safeft/op_table.hpp"

namespace safeft {

namespace {

bool needs(std::span<const bool> flags, std::size_t i) { return i < flags.size() && flags[i]; }

std::uint64_t matmul_cost(const OpGeometry& g) {
  return 2ULL * g.batch * g.m * g.k * g.n;
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::AddBias: return "add_bias";
    case OpKind::Scale: return "scale";
    case OpKind::Transpose: return "transpose";
    case OpKind::RowSoftmax: return "row_softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Gelu: return "gelu";
    case OpKind::Embedding: return "embedding_lookup";
    case OpKind::CrossEntropyMean: return "cross_entropy_mean";
    case OpKind::Dropout: return "dropout";
    case OpKind::SplitHeads: return "split_heads";
    case OpKind::MergeHeads: return "merge_heads";
    case OpKind::MeanPool: return "mean_pool";
  }
  return "unknown";
}

Retention retention(OpKind kind, const OpGeometry& g, std::span<const bool> in) {
  Retention r;
  switch (kind) {
    case OpKind::MatMul:
      // dA = dY * B^T needs B; dB = A^T * dY needs A.
      r.inputs[0] = needs(in, 1);
      r.inputs[1] = needs(in, 0);
      break;
    case OpKind::RowSoftmax:
      r.output = needs(in, 0);
      break;
    case OpKind::LayerNorm:
      if (needs(in, 0)) {
        r.inputs[1] = true;
        r.scratch_doubles = g.rows * g.cols + g.rows;
      } else if (needs(in, 1)) {
        r.scratch_doubles = g.rows * g.cols;
      }
      break;
    case OpKind::Gelu:
      r.inputs[0] = needs(in, 0);
      break;
    case OpKind::Embedding:
      if (needs(in, 0)) r.scratch_ints = g.rows;
      break;
    case OpKind::CrossEntropyMean:
      if (needs(in, 0)) {
        r.scratch_doubles = g.rows * g.cols;
        r.scratch_ints = g.rows;
      }
      break;
    case OpKind::Dropout:
      if (needs(in, 0)) r.scratch_doubles = g.elements;
      break;
    case OpKind::MeanPool:
      if (needs(in, 0)) r.scratch_ints = g.rows;
      break;
    case OpKind::Leaf:
    case OpKind::Add:
    case OpKind::AddBias:
    case OpKind::Scale:
    case OpKind::Transpose:
    case OpKind::SplitHeads:
    case OpKind::MergeHeads:
      break;
  }
  return r;
}

std::uint64_t forward_flops(OpKind kind, const OpGeometry& g) {
  using C = FlopConstants;
  switch (kind) {
    case OpKind::MatMul: return matmul_cost(g);
    case OpKind::Add:
    case OpKind::AddBias: return C::add * g.elements;
    case OpKind::Scale: return C::scale * g.elements;
    case OpKind::RowSoftmax: return C::softmax_fwd * g.elements;
    case OpKind::LayerNorm: return C::layer_norm_fwd * g.elements;
    case OpKind::Gelu: return C::gelu_fwd * g.elements;
    case OpKind::CrossEntropyMean: return C::cross_entropy_fwd * g.elements;
    case OpKind::Dropout: return C::dropout * g.elements;
    case OpKind::MeanPool: return C::mean_pool * g.elements;
    case OpKind::Leaf:
    case OpKind::Transpose:
    case OpKind::Embedding:
    case OpKind::SplitHeads:
    case OpKind::MergeHeads: return 0;
  }
  return 0;
}

std::uint64_t backward_flops(OpKind kind, const OpGeometry& g, std::span<const bool> in) {
  using C = FlopConstants;
  switch (kind) {
    case OpKind::MatMul:
      return matmul_cost(g) * (static_cast<std::uint64_t>(needs(in, 0)) + needs(in, 1));
    case OpKind::AddBias: return needs(in, 1) ? C::bias_grad * g.elements : 0;
    case OpKind::Scale: return needs(in, 0) ? C::scale * g.elements : 0;
    case OpKind::RowSoftmax: return needs(in, 0) ? C::softmax_bwd * g.elements : 0;
    case OpKind::LayerNorm:
      return (needs(in, 0) ? C::layer_norm_bwd_input * g.elements : 0) +
             (needs(in, 1) ? C::layer_norm_bwd_gamma * g.elements : 0) +
             (needs(in, 2) ? C::layer_norm_bwd_beta * g.elements : 0);
    case OpKind::Gelu: return needs(in, 0) ? C::gelu_bwd * g.elements : 0;
    case OpKind::Embedding: return needs(in, 0) ? C::embedding_bwd * g.rows * g.cols : 0;
    case OpKind::CrossEntropyMean: return needs(in, 0) ? C::cross_entropy_bwd * g.elements : 0;
    case OpKind::Dropout: return needs(in, 0) ? C::dropout * g.elements : 0;
    case OpKind::MeanPool: return needs(in, 0) ? C::mean_pool * g.elements : 0;
    case OpKind::Leaf:
    case OpKind::Add:
    case OpKind::Transpose:
    case OpKind::SplitHeads:
    case OpKind::MergeHeads: return 0;
  }
  return 0;
}

}  // namespace safeft
