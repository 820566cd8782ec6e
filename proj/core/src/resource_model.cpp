#include "safeft/resource_model.hpp"

#include <array>
#include <initializer_list>
#include <unordered_set>

#include "safeft/op_table.hpp"

namespace safeft {

namespace {

// Shape-free stand-in for a tape value: element count, gradient flag and
// whether its buffer is parameter storage (never counted as activation).
struct Sym {
  int id = -1;
  std::size_t elems = 0;
  bool grad = false;
  bool is_param = false;
};

class SymbolicTape {
 public:
  explicit SymbolicTape(int cut) : cut_(cut) {}

  void set_layer(int layer) { layer_ = layer; }

  Sym param(std::size_t elems, bool trainable) { return Sym{next_++, elems, trainable && layer_ >= cut_, true}; }
  Sym constant(std::size_t elems) { return Sym{next_++, elems, false, false}; }

  Sym op(OpKind kind, const OpGeometry& geo, std::initializer_list<Sym> inputs, std::size_t out_elems) {
    std::array<bool, 3> flags{};
    std::size_t i = 0;
    bool any = false;
    for (const auto& s : inputs) {
      flags[i] = layer_ >= cut_ && s.grad;
      any = any || flags[i];
      ++i;
    }
    const auto span = std::span<const bool>(flags.data(), i);
    Sym out{next_++, out_elems, any, false};
    cost_.forward_flops += forward_flops(kind, geo);
    if (any) {
      const auto r = retention(kind, geo, span);
      i = 0;
      for (const auto& s : inputs) {
        if (r.inputs[i] && !s.is_param && saved_.insert(s.id).second) floats_ += s.elems;
        ++i;
      }
      if (r.output && saved_.insert(out.id).second) floats_ += out.elems;
      floats_ += r.scratch_doubles;
      ints_ += r.scratch_ints;
      cost_.backward_flops += backward_flops(kind, geo, span);
    }
    return out;
  }

  StepCost finish() {
    cost_.activation_bytes = floats_ * kFloatBytes + ints_ * kIntBytes;
    return cost_;
  }

 private:
  int cut_;
  int layer_ = kInputLayer;
  int next_ = 0;
  std::unordered_set<int> saved_;
  std::size_t floats_ = 0;
  std::size_t ints_ = 0;
  StepCost cost_;
};

}  // namespace

int cut_from_mask(const std::vector<bool>& frozen_mask) {
  for (std::size_t i = 0; i < frozen_mask.size(); ++i) {
    if (!frozen_mask[i]) return static_cast<int>(i);
  }
  return static_cast<int>(frozen_mask.size());
}

StepCost step_cost(const ModelConfig& c, const std::vector<bool>& frozen_mask, std::size_t batch, std::size_t seq,
                   bool training) {
  const int L = c.n_layers;
  const std::size_t d = c.d_model, r = c.lora_rank, H = c.n_heads, hd = c.head_dim(), ff = c.d_ff;
  const std::size_t rows = batch * seq;
  SymbolicTape t(cut_from_mask(frozen_mask));
  using G = OpGeometry;

  // Mirrors Model::forward op for op.
  const Sym mask = t.constant(batch * H * seq * seq);
  t.set_layer(kInputLayer);
  auto tok = t.op(OpKind::Embedding, G::rowwise(rows, d), {t.param(c.vocab_size * d, false)}, rows * d);
  auto pos = t.op(OpKind::Embedding, G::rowwise(rows, d), {t.param(c.max_seq * d, false)}, rows * d);
  Sym h = t.op(OpKind::Add, G::elementwise(rows * d), {tok, pos}, rows * d);

  const bool dropout = training && c.lora_dropout > 0.0;
  for (int i = 0; i < L; ++i) {
    t.set_layer(i);
    const bool active = !frozen_mask[static_cast<std::size_t>(i)];
    auto linear = [&](const Sym& x, std::size_t in, std::size_t out) {
      auto w = t.param(in * out, false);
      auto y = t.op(OpKind::MatMul, G::matmul(1, rows, in, out), {x, w}, rows * out);
      auto b = t.param(out, false);
      return t.op(OpKind::AddBias, G::rowwise(rows, out), {y, b}, rows * out);
    };
    auto lora = [&]() {
      Sym x = dropout ? t.op(OpKind::Dropout, G::elementwise(rows * d), {h}, rows * d) : h;
      auto a = t.param(d * r, active);
      auto xa = t.op(OpKind::MatMul, G::matmul(1, rows, d, r), {x, a}, rows * r);
      auto bm = t.param(r * d, active);
      auto xab = t.op(OpKind::MatMul, G::matmul(1, rows, r, d), {xa, bm}, rows * d);
      return t.op(OpKind::Scale, G::elementwise(rows * d), {xab}, rows * d);
    };
    Sym q = linear(h, d, d);
    q = t.op(OpKind::Add, G::elementwise(rows * d), {q, lora()}, rows * d);
    Sym k = linear(h, d, d);
    Sym v = linear(h, d, d);
    v = t.op(OpKind::Add, G::elementwise(rows * d), {v, lora()}, rows * d);

    auto qh = t.op(OpKind::SplitHeads, G::elementwise(rows * d), {q}, rows * d);
    auto kh = t.op(OpKind::SplitHeads, G::elementwise(rows * d), {k}, rows * d);
    auto vh = t.op(OpKind::SplitHeads, G::elementwise(rows * d), {v}, rows * d);
    auto kt = t.op(OpKind::Transpose, G::elementwise(rows * d), {kh}, rows * d);
    const std::size_t score_elems = batch * H * seq * seq;
    auto s = t.op(OpKind::MatMul, G::matmul(batch * H, seq, hd, seq), {qh, kt}, score_elems);
    s = t.op(OpKind::Scale, G::elementwise(score_elems), {s}, score_elems);
    s = t.op(OpKind::Add, G::elementwise(score_elems), {s, mask}, score_elems);
    auto p = t.op(OpKind::RowSoftmax, G::rowwise(batch * H * seq, seq), {s}, score_elems);
    auto ctx = t.op(OpKind::MatMul, G::matmul(batch * H, seq, seq, hd), {p, vh}, rows * d);
    ctx = t.op(OpKind::MergeHeads, G::elementwise(rows * d), {ctx}, rows * d);
    auto o = linear(ctx, d, d);
    auto res1 = t.op(OpKind::Add, G::elementwise(rows * d), {h, o}, rows * d);
    auto g1 = t.param(d, false);
    auto b1 = t.param(d, false);
    auto h1 = t.op(OpKind::LayerNorm, G::rowwise(rows, d), {res1, g1, b1}, rows * d);
    auto u = linear(h1, d, ff);
    auto gu = t.op(OpKind::Gelu, G::elementwise(rows * ff), {u}, rows * ff);
    auto f = linear(gu, ff, d);
    auto res2 = t.op(OpKind::Add, G::elementwise(rows * d), {h1, f}, rows * d);
    auto g2 = t.param(d, false);
    auto b2 = t.param(d, false);
    h = t.op(OpKind::LayerNorm, G::rowwise(rows, d), {res2, g2, b2}, rows * d);
  }

  t.set_layer(L);
  G pool = G::rowwise(batch, d);
  pool.elements = rows * d;
  auto pooled = t.op(OpKind::MeanPool, pool, {h}, batch * d);
  auto w = t.param(d * c.n_classes, true);
  auto logits = t.op(OpKind::MatMul, G::matmul(1, batch, d, c.n_classes), {pooled, w}, batch * c.n_classes);
  auto bias = t.param(c.n_classes, true);
  logits = t.op(OpKind::AddBias, G::rowwise(batch, c.n_classes), {logits, bias}, batch * c.n_classes);
  t.op(OpKind::CrossEntropyMean, G::rowwise(batch, c.n_classes), {logits}, 1);
  return t.finish();
}

std::size_t modeled_activation_bytes(const ModelConfig& config, const std::vector<bool>& frozen_mask,
                                     std::size_t batch, std::size_t seq) {
  return step_cost(config, frozen_mask, batch, seq).activation_bytes;
}

FlopCount flops_per_step(const ModelConfig& config, const std::vector<bool>& frozen_mask, std::size_t batch,
                         std::size_t seq) {
  const auto cost = step_cost(config, frozen_mask, batch, seq);
  return FlopCount{cost.forward_flops, cost.backward_flops};
}

std::size_t trainable_parameter_count(const ModelConfig& c, const std::vector<bool>& frozen_mask) {
  std::size_t n = c.d_model * c.n_classes + c.n_classes;
  for (bool frozen : frozen_mask) {
    if (!frozen) n += 4 * c.d_model * c.lora_rank;
  }
  return n;
}

ResourceReport epoch_report(int epoch, const Model& model, std::size_t batch, std::size_t seq) {
  const auto mask = model.frozen_mask();
  const auto cost = step_cost(model.config(), mask, batch, seq);
  ResourceReport r;
  r.epoch = epoch;
  r.cut_layer = cut_from_mask(mask);
  r.activation_bytes = cost.activation_bytes;
  r.trainable_parameter_count = trainable_parameter_count(model.config(), mask);
  r.optimizer_bytes = 2 * kFloatBytes * r.trainable_parameter_count;
  r.gradient_bytes = kFloatBytes * r.trainable_parameter_count;
  r.parameter_bytes = model.parameter_bytes();
  r.forward_flops = cost.forward_flops;
  r.backward_flops = cost.backward_flops;
  return r;
}

}  // namespace safeft
