#include "safeft/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "kernels.hpp"

namespace safeft {

struct Tape::Node {
  OpKind kind = OpKind::Leaf;
  std::vector<NodeId> parents;
  std::array<bool, 3> parent_grad{};
  int layer = kInputLayer;
  bool requires_grad = false;
  Retention keep;
  OpGeometry geo;
  Shape out_shape;
  std::array<Shape, 3> in_shapes;

  std::array<std::shared_ptr<const Tensor>, 3> saved_in;
  std::shared_ptr<const Tensor> saved_out;
  std::vector<std::shared_ptr<const Tensor>> scratch;
  std::shared_ptr<const std::vector<std::int64_t>> ints;

  double scalar = 0.0;
  std::size_t aux0 = 0;
  std::size_t aux1 = 0;
  std::size_t aux2 = 0;

  std::string param_name;
  bool trainable = false;

  bool retained() const {
    return saved_out || ints || !scratch.empty() ||
           std::any_of(saved_in.begin(), saved_in.end(), [](const auto& p) { return p != nullptr; });
  }
};

namespace {

std::string shapes_msg(std::string_view op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

void check_finite(const Tensor& t, OpKind kind) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + std::string(op_name(kind)));
  }
}

void accumulate(Tensor& into, Tensor&& g) {
  if (into.empty()) {
    into = std::move(g);
    return;
  }
  auto dst = into.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Tape::Tape(TapeOptions options) : options_(options) {}

Tape::~Tape() = default;
Tape::Tape(Tape&&) noexcept = default;
Tape& Tape::operator=(Tape&&) noexcept = default;

Var Tape::parameter(std::string name, std::shared_ptr<const Tensor> value, bool trainable) {
  auto node = std::make_unique<Node>();
  node->kind = OpKind::Leaf;
  node->layer = layer_;
  node->out_shape = value->shape();
  node->param_name = std::move(name);
  node->trainable = trainable;
  node->requires_grad = options_.grad_enabled && trainable && !tagged_below_cut();
  parameters_.insert(value.get());
  const auto id = static_cast<NodeId>(nodes_.size());
  const bool rg = node->requires_grad;
  nodes_.push_back(std::move(node));
  return Var{id, std::move(value), rg};
}

Var Tape::constant(Tensor value) {
  auto node = std::make_unique<Node>();
  node->kind = OpKind::Leaf;
  node->layer = layer_;
  node->out_shape = value.shape();
  const auto id = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(std::move(node));
  return Var{id, std::make_shared<const Tensor>(std::move(value)), false};
}

Var Tape::record(OpKind kind, std::vector<const Var*> inputs, Tensor out, const OpGeometry& geo) {
  check_finite(out, kind);
  auto& node = *nodes_.back();
  node.out_shape = out.shape();
  auto value = std::make_shared<const Tensor>(std::move(out));
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (node.keep.inputs[i]) node.saved_in[i] = inputs[i]->value;
  }
  if (node.keep.output) node.saved_out = value;
  std::size_t scratch = 0;
  for (const auto& s : node.scratch) scratch += s->numel();
  const std::size_t ints = node.ints ? node.ints->size() : 0;
  if (scratch != node.keep.scratch_doubles || ints != node.keep.scratch_ints) {
    throw std::logic_error(std::string("retention table mismatch in ") + std::string(op_name(kind)));
  }
  forward_flops_ += safeft::forward_flops(kind, geo);
  return Var{static_cast<NodeId>(nodes_.size() - 1), std::move(value), node.requires_grad};
}

namespace {

// Pushes a node for an op, resolving gradient flags and the retention entry.
template <typename NodeT>
NodeT& open_node(std::vector<std::unique_ptr<NodeT>>& nodes, OpKind kind, std::initializer_list<const Var*> inputs,
                 const OpGeometry& geo, int layer, bool below_cut, bool grad_enabled) {
  auto node = std::make_unique<NodeT>();
  node->kind = kind;
  node->layer = layer;
  node->geo = geo;
  std::size_t i = 0;
  bool any = false;
  for (const Var* v : inputs) {
    node->parents.push_back(v->id);
    node->in_shapes[i] = v->shape();
    node->parent_grad[i] = grad_enabled && !below_cut && v->requires_grad;
    any = any || node->parent_grad[i];
    ++i;
  }
  node->requires_grad = any;
  if (any) node->keep = retention(kind, geo, std::span<const bool>(node->parent_grad.data(), i));
  nodes.push_back(std::move(node));
  return *nodes.back();
}

}  // namespace

Var Tape::matmul(const Var& a, const Var& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  std::size_t batch = 1, m, k, n;
  if (sa.size() == 2 && sb.size() == 2) {
    m = sa[0];
    k = sa[1];
    n = sb[1];
    if (sb[0] != k) throw ShapeError(shapes_msg("matmul", sa, sb));
  } else if (sa.size() == 3 && sb.size() == 3) {
    batch = sa[0];
    m = sa[1];
    k = sa[2];
    n = sb[2];
    if (sb[0] != batch || sb[1] != k) throw ShapeError(shapes_msg("matmul", sa, sb));
  } else {
    throw ShapeError(shapes_msg("matmul", sa, sb));
  }
  const auto geo = OpGeometry::matmul(batch, m, k, n);
  open_node(nodes_, OpKind::MatMul, {&a, &b}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  Tensor out(sa.size() == 2 ? Shape{m, n} : Shape{batch, m, n});
  for (std::size_t t = 0; t < batch; ++t) {
    kernels::gemm(a.tensor().raw() + t * m * k, b.tensor().raw() + t * k * n, out.raw() + t * m * n, m, k, n,
                  false, false);
  }
  return record(OpKind::MatMul, {&a, &b}, std::move(out), geo);
}

Var Tape::add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw ShapeError(shapes_msg("add", a.shape(), b.shape()));
  const auto geo = OpGeometry::elementwise(a.tensor().numel());
  open_node(nodes_, OpKind::Add, {&a, &b}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  Tensor out = a.tensor();
  auto o = out.data();
  auto y = b.tensor().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += y[i];
  return record(OpKind::Add, {&a, &b}, std::move(out), geo);
}

Var Tape::add_bias(const Var& x, const Var& bias) {
  const std::size_t cols = x.tensor().cols();
  if (bias.tensor().numel() != cols || bias.tensor().cols() != cols) {
    throw ShapeError(shapes_msg("add_bias", x.shape(), bias.shape()));
  }
  const std::size_t rows = x.tensor().rows();
  const auto geo = OpGeometry::rowwise(rows, cols);
  open_node(nodes_, OpKind::AddBias, {&x, &bias}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  Tensor out = x.tensor();
  const double* bp = bias.tensor().raw();
  double* op = out.raw();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) op[r * cols + c] += bp[c];
  }
  return record(OpKind::AddBias, {&x, &bias}, std::move(out), geo);
}

Var Tape::scale(const Var& x, double factor) {
  const auto geo = OpGeometry::elementwise(x.tensor().numel());
  auto& node = open_node(nodes_, OpKind::Scale, {&x}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  node.scalar = factor;
  Tensor out = x.tensor();
  for (auto& v : out.data()) v *= factor;
  return record(OpKind::Scale, {&x}, std::move(out), geo);
}

Var Tape::transpose(const Var& x) {
  const auto& s = x.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("transpose: expected rank 2 or 3, got " + to_string(s));
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t r = s[s.size() - 2];
  const std::size_t c = s[s.size() - 1];
  const auto geo = OpGeometry::elementwise(x.tensor().numel());
  auto& node = open_node(nodes_, OpKind::Transpose, {&x}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  node.aux0 = batch;
  node.aux1 = r;
  node.aux2 = c;
  Tensor out(s.size() == 3 ? Shape{batch, c, r} : Shape{c, r});
  const double* in = x.tensor().raw();
  double* o = out.raw();
  for (std::size_t t = 0; t < batch; ++t) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) o[t * r * c + j * r + i] = in[t * r * c + i * c + j];
    }
  }
  return record(OpKind::Transpose, {&x}, std::move(out), geo);
}

Var Tape::row_softmax(const Var& x) {
  const std::size_t rows = x.tensor().rows();
  const std::size_t cols = x.tensor().cols();
  const auto geo = OpGeometry::rowwise(rows, cols);
  open_node(nodes_, OpKind::RowSoftmax, {&x}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  Tensor out(x.shape());
  const double* in = x.tensor().raw();
  double* o = out.raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in + r * cols;
    double* orow = o + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      orow[c] = std::exp(row[c] - mx);
      sum += orow[c];
    }
    const double inv = 1.0 / sum;
    for (std::size_t c = 0; c < cols; ++c) orow[c] *= inv;
  }
  return record(OpKind::RowSoftmax, {&x}, std::move(out), geo);
}

Var Tape::layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t rows = x.tensor().rows();
  const std::size_t cols = x.tensor().cols();
  if (gamma.tensor().numel() != cols || beta.tensor().numel() != cols) {
    throw ShapeError(shapes_msg("layer_norm", x.shape(), gamma.shape()));
  }
  const auto geo = OpGeometry::rowwise(rows, cols);
  auto& node =
      open_node(nodes_, OpKind::LayerNorm, {&x, &gamma, &beta}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  node.scalar = eps;
  Tensor xhat(Shape{rows, cols});
  Tensor rstd(Shape{rows});
  Tensor out(x.shape());
  const double* in = x.tensor().raw();
  const double* g = gamma.tensor().raw();
  const double* b = beta.tensor().raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += row[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t c = 0; c < cols; ++c) {
      const double xh = (row[c] - mean) * rs;
      xhat[r * cols + c] = xh;
      out[r * cols + c] = xh * g[c] + b[c];
    }
  }
  if (node.parent_grad[0]) {
    node.scratch.push_back(std::make_shared<const Tensor>(std::move(xhat)));
    node.scratch.push_back(std::make_shared<const Tensor>(std::move(rstd)));
  } else if (node.parent_grad[1]) {
    node.scratch.push_back(std::make_shared<const Tensor>(std::move(xhat)));
  }
  return record(OpKind::LayerNorm, {&x, &gamma, &beta}, std::move(out), geo);
}

Var Tape::gelu(const Var& x) {
  const auto geo = OpGeometry::elementwise(x.tensor().numel());
  open_node(nodes_, OpKind::Gelu, {&x}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  Tensor out = x.tensor();
  for (auto& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 * 0.5));
  return record(OpKind::Gelu, {&x}, std::move(out), geo);
}

Var Tape::embedding(const Var& table, std::span<const std::int64_t> ids) {
  if (table.shape().size() != 2) throw ShapeError("embedding_lookup: table must be 2-D, got " + to_string(table.shape()));
  const std::size_t vocab = table.shape()[0];
  const std::size_t d = table.shape()[1];
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                                  std::to_string(vocab) + " rows");
    }
  }
  if (ids.empty()) throw ShapeError("embedding_lookup: no ids");
  const auto geo = OpGeometry::rowwise(ids.size(), d);
  auto& node = open_node(nodes_, OpKind::Embedding, {&table}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  Tensor out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.tensor().raw() + static_cast<std::size_t>(ids[i]) * d, d, out.raw() + i * d);
  }
  if (node.keep.scratch_ints) node.ints = std::make_shared<const std::vector<std::int64_t>>(ids.begin(), ids.end());
  return record(OpKind::Embedding, {&table}, std::move(out), geo);
}

Var Tape::cross_entropy_mean(const Var& logits, std::span<const std::int64_t> labels) {
  if (logits.shape().size() != 2 || logits.shape()[0] != labels.size()) {
    throw ShapeError("cross_entropy_mean: logits " + to_string(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = logits.shape()[0];
  const std::size_t cols = logits.shape()[1];
  for (auto y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw std::invalid_argument("cross_entropy_mean: label " + std::to_string(y) + " outside " +
                                  std::to_string(cols) + " classes");
    }
  }
  const auto geo = OpGeometry::rowwise(rows, cols);
  auto& node =
      open_node(nodes_, OpKind::CrossEntropyMean, {&logits}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  Tensor probs(Shape{rows, cols});
  const double* in = logits.tensor().raw();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(row[c] - mx);
    const double lse = mx + std::log(sum);
    total += lse - row[labels[r]];
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] = std::exp(row[c] - lse);
  }
  if (node.keep.scratch_doubles) {
    node.scratch.push_back(std::make_shared<const Tensor>(std::move(probs)));
    node.ints = std::make_shared<const std::vector<std::int64_t>>(labels.begin(), labels.end());
  }
  return record(OpKind::CrossEntropyMean, {&logits}, Tensor::scalar(total / static_cast<double>(rows)), geo);
}

Var Tape::dropout(const Var& x, double p) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  const auto geo = OpGeometry::elementwise(x.tensor().numel());
  auto& node = open_node(nodes_, OpKind::Dropout, {&x}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  const auto id = static_cast<std::uint64_t>(nodes_.size() - 1);
  Tensor mask(x.shape(), 1.0);
  if (options_.training && p > 0.0) {
    const double keep = 1.0 / (1.0 - p);
    std::uint64_t h = kernels::splitmix(options_.seed);
    h = kernels::splitmix(h ^ options_.step);
    h = kernels::splitmix(h ^ id);
    auto m = mask.data();
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double u = static_cast<double>(kernels::splitmix(h ^ i) >> 11) * 0x1.0p-53;
      m[i] = u < p ? 0.0 : keep;
    }
  }
  Tensor out = x.tensor();
  auto o = out.data();
  auto m = mask.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= m[i];
  if (node.keep.scratch_doubles) node.scratch.push_back(std::make_shared<const Tensor>(std::move(mask)));
  return record(OpKind::Dropout, {&x}, std::move(out), geo);
}

Var Tape::split_heads(const Var& x, std::size_t batch, std::size_t seq, std::size_t heads) {
  const auto& s = x.shape();
  if (s.size() != 2 || s[0] != batch * seq || heads == 0 || s[1] % heads != 0) {
    throw ShapeError("split_heads: cannot split " + to_string(s) + " into " + std::to_string(heads) + " heads");
  }
  const std::size_t d = s[1];
  const std::size_t hd = d / heads;
  const auto geo = OpGeometry::elementwise(x.tensor().numel());
  auto& node = open_node(nodes_, OpKind::SplitHeads, {&x}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  node.aux0 = batch;
  node.aux1 = seq;
  node.aux2 = heads;
  Tensor out(Shape{batch * heads, seq, hd});
  const double* in = x.tensor().raw();
  double* o = out.raw();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < seq; ++t) {
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy_n(in + (b * seq + t) * d + h * hd, hd, o + ((b * heads + h) * seq + t) * hd);
      }
    }
  }
  return record(OpKind::SplitHeads, {&x}, std::move(out), geo);
}

Var Tape::merge_heads(const Var& x, std::size_t batch, std::size_t seq, std::size_t heads) {
  const auto& s = x.shape();
  if (s.size() != 3 || s[0] != batch * heads || s[1] != seq) {
    throw ShapeError("merge_heads: cannot merge " + to_string(s));
  }
  const std::size_t hd = s[2];
  const std::size_t d = hd * heads;
  const auto geo = OpGeometry::elementwise(x.tensor().numel());
  auto& node = open_node(nodes_, OpKind::MergeHeads, {&x}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  node.aux0 = batch;
  node.aux1 = seq;
  node.aux2 = heads;
  Tensor out(Shape{batch * seq, d});
  const double* in = x.tensor().raw();
  double* o = out.raw();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < seq; ++t) {
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy_n(in + ((b * heads + h) * seq + t) * hd, hd, o + (b * seq + t) * d + h * hd);
      }
    }
  }
  return record(OpKind::MergeHeads, {&x}, std::move(out), geo);
}

Var Tape::mean_pool(const Var& x, std::span<const std::int64_t> lengths, std::size_t seq) {
  const auto& s = x.shape();
  const std::size_t groups = lengths.size();
  if (s.size() != 2 || groups == 0 || s[0] != groups * seq) {
    throw ShapeError("mean_pool: " + to_string(s) + " is not " + std::to_string(groups) + " groups of " +
                     std::to_string(seq));
  }
  for (auto len : lengths) {
    if (len < 1 || static_cast<std::size_t>(len) > seq) throw std::invalid_argument("mean_pool: bad group length");
  }
  const std::size_t d = s[1];
  OpGeometry geo = OpGeometry::rowwise(groups, d);
  geo.elements = x.tensor().numel();
  auto& node = open_node(nodes_, OpKind::MeanPool, {&x}, geo, layer_, tagged_below_cut(), options_.grad_enabled);
  node.aux1 = seq;
  Tensor out(Shape{groups, d});
  const double* in = x.tensor().raw();
  for (std::size_t b = 0; b < groups; ++b) {
    const auto len = static_cast<std::size_t>(lengths[b]);
    double* orow = out.raw() + b * d;
    for (std::size_t t = 0; t < len; ++t) {
      const double* row = in + (b * seq + t) * d;
      for (std::size_t c = 0; c < d; ++c) orow[c] += row[c];
    }
    const double inv = 1.0 / static_cast<double>(len);
    for (std::size_t c = 0; c < d; ++c) orow[c] *= inv;
  }
  if (node.keep.scratch_ints) node.ints = std::make_shared<const std::vector<std::int64_t>>(lengths.begin(), lengths.end());
  return record(OpKind::MeanPool, {&x}, std::move(out), geo);
}

NodeInfo Tape::node(NodeId id) const {
  const auto& n = *nodes_.at(static_cast<std::size_t>(id));
  return NodeInfo{n.kind, n.parents, n.layer, n.requires_grad, n.retained()};
}

std::size_t Tape::retained_bytes() const {
  std::unordered_set<const Tensor*> seen;
  std::size_t bytes = 0;
  auto count = [&](const std::shared_ptr<const Tensor>& t) {
    if (!t || parameters_.count(t.get()) || !seen.insert(t.get()).second) return;
    bytes += t->numel() * kFloatBytes;
  };
  for (const auto& n : nodes_) {
    for (const auto& s : n->saved_in) count(s);
    count(n->saved_out);
    for (const auto& s : n->scratch) count(s);
    if (n->ints) bytes += n->ints->size() * kIntBytes;
  }
  return bytes;
}

GradMap Tape::backward(const Var& loss) {
  if (!options_.grad_enabled) throw std::logic_error("backward on a tape recorded without gradient tracking");
  if (consumed_) throw std::logic_error("backward already ran on this tape");
  if (loss.tensor().numel() != 1) throw ShapeError("backward: loss must be a scalar, got " + to_string(loss.shape()));
  consumed_ = true;
  GradMap out;
  if (!loss.requires_grad) return out;

  std::vector<Tensor> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.id)] = Tensor(loss.shape(), 1.0);

  for (std::size_t idx = static_cast<std::size_t>(loss.id) + 1; idx-- > 0;) {
    Node& n = *nodes_[idx];
    Tensor& g = grads[idx];
    if (g.empty() || !n.requires_grad) {
      g = Tensor();
      continue;
    }
    auto push = [&](std::size_t slot, Tensor&& t) {
      accumulate(grads[static_cast<std::size_t>(n.parents[slot])], std::move(t));
    };
    const auto flags = std::span<const bool>(n.parent_grad.data(), n.parents.size());
    backward_flops_ += safeft::backward_flops(n.kind, n.geo, flags);

    switch (n.kind) {
      case OpKind::Leaf:
        if (n.trainable) {
          auto [it, fresh] = out.try_emplace(n.param_name, std::move(g));
          if (!fresh) accumulate(it->second, std::move(g));
        }
        break;
      case OpKind::MatMul: {
        const auto& geo = n.geo;
        if (n.parent_grad[0]) {
          Tensor da(n.in_shapes[0]);
          const double* b = n.saved_in[1]->raw();
          for (std::size_t t = 0; t < geo.batch; ++t) {
            kernels::gemm(g.raw() + t * geo.m * geo.n, b + t * geo.k * geo.n, da.raw() + t * geo.m * geo.k, geo.m,
                          geo.n, geo.k, false, true);
          }
          push(0, std::move(da));
        }
        if (n.parent_grad[1]) {
          Tensor db(n.in_shapes[1]);
          const double* a = n.saved_in[0]->raw();
          for (std::size_t t = 0; t < geo.batch; ++t) {
            kernels::gemm(a + t * geo.m * geo.k, g.raw() + t * geo.m * geo.n, db.raw() + t * geo.k * geo.n, geo.k,
                          geo.m, geo.n, true, false);
          }
          push(1, std::move(db));
        }
        break;
      }
      case OpKind::Add:
        if (n.parent_grad[0] && n.parent_grad[1]) {
          Tensor copy = g;
          push(0, std::move(copy));
          push(1, std::move(g));
        } else if (n.parent_grad[0]) {
          push(0, std::move(g));
        } else {
          push(1, std::move(g));
        }
        break;
      case OpKind::AddBias: {
        if (n.parent_grad[1]) {
          Tensor db(n.in_shapes[1]);
          const std::size_t rows = n.geo.rows, cols = n.geo.cols;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) db[c] += g[r * cols + c];
          }
          push(1, std::move(db));
        }
        if (n.parent_grad[0]) push(0, std::move(g));
        break;
      }
      case OpKind::Scale:
        for (auto& v : g.data()) v *= n.scalar;
        push(0, std::move(g));
        break;
      case OpKind::Transpose: {
        Tensor dx(n.in_shapes[0]);
        const std::size_t batch = n.aux0, r = n.aux1, c = n.aux2;
        for (std::size_t t = 0; t < batch; ++t) {
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) dx[t * r * c + i * c + j] = g[t * r * c + j * r + i];
          }
        }
        push(0, std::move(dx));
        break;
      }
      case OpKind::RowSoftmax: {
        const Tensor& y = *n.saved_out;
        const std::size_t rows = n.geo.rows, cols = n.geo.cols;
        Tensor dx(n.in_shapes[0]);
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] = y[r * cols + c] * (g[r * cols + c] - dot);
        }
        push(0, std::move(dx));
        break;
      }
      case OpKind::LayerNorm: {
        const std::size_t rows = n.geo.rows, cols = n.geo.cols;
        const Tensor* xhat = n.scratch.empty() ? nullptr : n.scratch[0].get();
        if (n.parent_grad[1]) {
          Tensor dgamma(n.in_shapes[1]);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) dgamma[c] += g[r * cols + c] * (*xhat)[r * cols + c];
          }
          push(1, std::move(dgamma));
        }
        if (n.parent_grad[2]) {
          Tensor dbeta(n.in_shapes[2]);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) dbeta[c] += g[r * cols + c];
          }
          push(2, std::move(dbeta));
        }
        if (n.parent_grad[0]) {
          const Tensor& rstd = *n.scratch[1];
          const double* gamma = n.saved_in[1]->raw();
          Tensor dx(n.in_shapes[0]);
          const double inv_cols = 1.0 / static_cast<double>(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              const double dxh = g[r * cols + c] * gamma[c];
              mean_d += dxh;
              mean_dx += dxh * (*xhat)[r * cols + c];
            }
            mean_d *= inv_cols;
            mean_dx *= inv_cols;
            for (std::size_t c = 0; c < cols; ++c) {
              const double dxh = g[r * cols + c] * gamma[c];
              dx[r * cols + c] = rstd[r] * (dxh - mean_d - (*xhat)[r * cols + c] * mean_dx);
            }
          }
          push(0, std::move(dx));
        }
        break;
      }
      case OpKind::Gelu: {
        const Tensor& x = *n.saved_in[0];
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const double v = x[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 * 0.5));
          g[i] *= cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
        }
        push(0, std::move(g));
        break;
      }
      case OpKind::Embedding: {
        Tensor dt(n.in_shapes[0]);
        const std::size_t d = n.geo.cols;
        const auto& ids = *n.ints;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          double* row = dt.raw() + static_cast<std::size_t>(ids[i]) * d;
          for (std::size_t c = 0; c < d; ++c) row[c] += g[i * d + c];
        }
        push(0, std::move(dt));
        break;
      }
      case OpKind::CrossEntropyMean: {
        Tensor dx = *n.scratch[0];
        const auto& labels = *n.ints;
        const std::size_t rows = n.geo.rows, cols = n.geo.cols;
        const double s = g[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          dx[r * cols + static_cast<std::size_t>(labels[r])] -= 1.0;
          for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] *= s;
        }
        push(0, std::move(dx));
        break;
      }
      case OpKind::Dropout: {
        const Tensor& mask = *n.scratch[0];
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= mask[i];
        push(0, std::move(g));
        break;
      }
      case OpKind::SplitHeads: {
        const std::size_t batch = n.aux0, seq = n.aux1, heads = n.aux2;
        const std::size_t d = n.in_shapes[0][1], hd = d / heads;
        Tensor dx(n.in_shapes[0]);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < seq; ++t) {
            for (std::size_t h = 0; h < heads; ++h) {
              std::copy_n(g.raw() + ((b * heads + h) * seq + t) * hd, hd, dx.raw() + (b * seq + t) * d + h * hd);
            }
          }
        }
        push(0, std::move(dx));
        break;
      }
      case OpKind::MergeHeads: {
        const std::size_t batch = n.aux0, seq = n.aux1, heads = n.aux2;
        const std::size_t hd = n.in_shapes[0][2], d = hd * heads;
        Tensor dx(n.in_shapes[0]);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < seq; ++t) {
            for (std::size_t h = 0; h < heads; ++h) {
              std::copy_n(g.raw() + (b * seq + t) * d + h * hd, hd, dx.raw() + ((b * heads + h) * seq + t) * hd);
            }
          }
        }
        push(0, std::move(dx));
        break;
      }
      case OpKind::MeanPool: {
        const auto& lengths = *n.ints;
        const std::size_t seq = n.aux1, d = n.geo.cols;
        Tensor dx(n.in_shapes[0]);
        for (std::size_t b = 0; b < lengths.size(); ++b) {
          const auto len = static_cast<std::size_t>(lengths[b]);
          const double inv = 1.0 / static_cast<double>(len);
          for (std::size_t t = 0; t < len; ++t) {
            for (std::size_t c = 0; c < d; ++c) dx[(b * seq + t) * d + c] = g[b * d + c] * inv;
          }
        }
        push(0, std::move(dx));
        break;
      }
    }
    grads[idx] = Tensor();
    n.saved_in = {};
    n.saved_out.reset();
    n.scratch.clear();
    n.ints.reset();
  }
  return out;
}

}  // namespace safeft
