#include "safeft/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace safeft {

void ModelConfig::validate(const std::string& prefix) const {
  auto fail = [&](const std::string& field, const std::string& why) {
    throw ConfigError(prefix + "." + field + ": " + why);
  };
  if (n_layers < 1) fail("n_layers", "must be >= 1");
  if (d_model < 1) fail("d_model", "must be >= 1");
  if (n_heads < 1) fail("n_heads", "must be >= 1");
  if (d_model % n_heads != 0) fail("n_heads", "must divide d_model");
  if (d_ff < 1) fail("d_ff", "must be >= 1");
  if (vocab_size < 2) fail("vocab_size", "must be >= 2");
  if (max_seq < 1) fail("max_seq", "must be >= 1");
  if (n_classes < 2) fail("n_classes", "must be >= 2");
  if (lora_rank < 1) fail("lora_rank", "must be >= 1");
  if (!(lora_alpha > 0.0)) fail("lora_alpha", "must be > 0");
  if (!(lora_dropout >= 0.0 && lora_dropout < 1.0)) fail("lora_dropout", "must lie in [0, 1)");
}

std::size_t Batch::valid_rows() const {
  std::size_t n = 0;
  for (auto len : lengths) n += static_cast<std::size_t>(len);
  return n;
}

namespace param_names {

std::string layer_prefix(int layer) { return "layers." + std::to_string(layer) + "."; }

std::string lora_a(int layer, char proj) { return layer_prefix(layer) + "attn." + proj + ".lora_A"; }

std::string lora_b(int layer, char proj) { return layer_prefix(layer) + "attn." + proj + ".lora_B"; }

}  // namespace param_names

namespace {

constexpr double kBaseStd = 0.02;
constexpr double kMaskValue = -1e9;

}  // namespace

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model model;
  model.config_ = config;
  model.adapters_.assign(static_cast<std::size_t>(config.n_layers), AdapterState{});

  std::mt19937_64 rng(seed);
  auto gaussian = [&](Shape shape, double stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = dist(rng);
    return t;
  };
  auto add = [&](std::string name, Tensor value, ParamRole role, int layer) {
    model.params_.push_back(Parameter{std::move(name), std::make_shared<Tensor>(std::move(value)), role, layer});
  };

  const std::size_t d = config.d_model;
  const std::size_t r = config.lora_rank;
  add("embed.token", gaussian({config.vocab_size, d}, kBaseStd), ParamRole::Base, kInputLayer);
  add("embed.position", gaussian({config.max_seq, d}, kBaseStd), ParamRole::Base, kInputLayer);
  const double a_std = 1.0 / std::sqrt(static_cast<double>(d));
  for (int i = 0; i < config.n_layers; ++i) {
    const auto p = param_names::layer_prefix(i);
    for (char proj : {'q', 'k', 'v', 'o'}) {
      add(p + "attn." + proj + ".weight", gaussian({d, d}, kBaseStd), ParamRole::Base, i);
      add(p + "attn." + proj + ".bias", Tensor({d}), ParamRole::Base, i);
    }
    for (char proj : {'q', 'v'}) {
      add(param_names::lora_a(i, proj), gaussian({d, r}, a_std), ParamRole::Adapter, i);
      add(param_names::lora_b(i, proj), Tensor({r, d}), ParamRole::Adapter, i);
    }
    add(p + "ln1.gamma", Tensor({d}, 1.0), ParamRole::Base, i);
    add(p + "ln1.beta", Tensor({d}), ParamRole::Base, i);
    add(p + "ffn.fc1.weight", gaussian({d, config.d_ff}, kBaseStd), ParamRole::Base, i);
    add(p + "ffn.fc1.bias", Tensor({config.d_ff}), ParamRole::Base, i);
    add(p + "ffn.fc2.weight", gaussian({config.d_ff, d}, kBaseStd), ParamRole::Base, i);
    add(p + "ffn.fc2.bias", Tensor({d}), ParamRole::Base, i);
    add(p + "ln2.gamma", Tensor({d}, 1.0), ParamRole::Base, i);
    add(p + "ln2.beta", Tensor({d}), ParamRole::Base, i);
  }
  add(param_names::head_weight, gaussian({d, config.n_classes}, kBaseStd), ParamRole::Head, config.n_layers);
  add(param_names::head_bias, Tensor({config.n_classes}), ParamRole::Head, config.n_layers);
  return model;
}

Model Model::clone() const {
  Model copy;
  copy.config_ = config_;
  copy.adapters_ = adapters_;
  copy.params_.reserve(params_.size());
  for (const auto& p : params_) {
    copy.params_.push_back(Parameter{p.name, std::make_shared<Tensor>(*p.value), p.role, p.layer});
  }
  return copy;
}

const Parameter& Model::parameter(const std::string& name) const {
  auto it = std::find_if(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
  if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
  return *it;
}

Tensor& Model::mutable_value(const std::string& name) { return *parameter(name).value; }

std::vector<bool> Model::frozen_mask() const {
  std::vector<bool> mask;
  mask.reserve(adapters_.size());
  for (const auto& a : adapters_) mask.push_back(a.frozen());
  return mask;
}

int Model::cut_layer() const {
  for (int i = 0; i < n_layers(); ++i) {
    if (!adapters_[static_cast<std::size_t>(i)].frozen()) return i;
  }
  return n_layers();
}

std::vector<std::string> Model::adapter_parameter_names(int layer) const {
  return {param_names::lora_a(layer, 'q'), param_names::lora_b(layer, 'q'), param_names::lora_a(layer, 'v'),
          param_names::lora_b(layer, 'v')};
}

std::size_t Model::adapter_parameter_count(int /*layer*/) const {
  return 4 * config_.d_model * config_.lora_rank;
}

std::size_t Model::head_parameter_count() const { return config_.d_model * config_.n_classes + config_.n_classes; }

std::vector<std::string> Model::trainable_parameter_names() const {
  std::vector<std::string> names;
  for (const auto& p : params_) {
    if (p.role == ParamRole::Head) names.push_back(p.name);
    if (p.role == ParamRole::Adapter && !adapter(p.layer).frozen()) names.push_back(p.name);
  }
  return names;
}

std::size_t Model::parameter_bytes() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value->bytes();
  return n;
}

Var Model::param(Tape& tape, const std::string& name) const {
  const auto& p = parameter(name);
  bool trainable = false;
  if (p.role == ParamRole::Head) trainable = true;
  if (p.role == ParamRole::Adapter) trainable = !adapter(p.layer).frozen();
  return tape.parameter(p.name, p.value, trainable);
}

void Model::check_batch(const Batch& batch) const {
  if (batch.size == 0 || batch.seq == 0) throw std::invalid_argument("empty batch");
  if (batch.seq > config_.max_seq) {
    throw std::invalid_argument("sequence length " + std::to_string(batch.seq) + " exceeds max_seq " +
                                std::to_string(config_.max_seq));
  }
  if (batch.tokens.size() != batch.size * batch.seq || batch.lengths.size() != batch.size) {
    throw std::invalid_argument("batch buffers do not match size x seq");
  }
  for (auto t : batch.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
}

Var Model::embed(Tape& tape, const Batch& batch) const {
  tape.set_layer(kInputLayer);
  std::vector<std::int64_t> positions(batch.size * batch.seq);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int64_t>(i % batch.seq);
  auto tok = tape.embedding(param(tape, "embed.token"), batch.tokens);
  auto pos = tape.embedding(param(tape, "embed.position"), positions);
  return tape.add(tok, pos);
}

Var Model::attention_mask(Tape& tape, const Batch& batch) const {
  const std::size_t heads = config_.n_heads;
  const std::size_t s = batch.seq;
  Tensor mask(Shape{batch.size * heads, s, s});
  for (std::size_t b = 0; b < batch.size; ++b) {
    const auto len = static_cast<std::size_t>(batch.lengths[b]);
    for (std::size_t h = 0; h < heads; ++h) {
      double* m = mask.raw() + (b * heads + h) * s * s;
      for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t j = len; j < s; ++j) m[i * s + j] = kMaskValue;
      }
    }
  }
  tape.set_layer(kInputLayer);
  return tape.constant(std::move(mask));
}

Var Model::block(Tape& tape, const Var& h, int layer, const Batch& batch, const Var& mask, bool with_adapter) const {
  tape.set_layer(layer);
  const auto p = param_names::layer_prefix(layer);
  const double p_drop = tape.options().training ? config_.lora_dropout : 0.0;
  const double scaling = config_.lora_scaling();

  auto lora = [&](char proj) {
    Var x = p_drop > 0.0 ? tape.dropout(h, p_drop) : h;
    auto xa = tape.matmul(x, param(tape, param_names::lora_a(layer, proj)));
    auto xab = tape.matmul(xa, param(tape, param_names::lora_b(layer, proj)));
    return tape.scale(xab, scaling);
  };
  auto linear = [&](const Var& x, const std::string& stem) {
    return tape.add_bias(tape.matmul(x, param(tape, stem + ".weight")), param(tape, stem + ".bias"));
  };

  Var q = linear(h, p + "attn.q");
  if (with_adapter) q = tape.add(q, lora('q'));
  Var k = linear(h, p + "attn.k");
  Var v = linear(h, p + "attn.v");
  if (with_adapter) v = tape.add(v, lora('v'));

  const std::size_t heads = config_.n_heads;
  auto qh = tape.split_heads(q, batch.size, batch.seq, heads);
  auto kh = tape.split_heads(k, batch.size, batch.seq, heads);
  auto vh = tape.split_heads(v, batch.size, batch.seq, heads);
  auto scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(config_.head_dim())));
  scores = tape.add(scores, mask);
  auto probs = tape.row_softmax(scores);
  auto ctx = tape.merge_heads(tape.matmul(probs, vh), batch.size, batch.seq, heads);
  auto o = linear(ctx, p + "attn.o");
  auto h1 = tape.layer_norm(tape.add(h, o), param(tape, p + "ln1.gamma"), param(tape, p + "ln1.beta"));
  auto u = linear(h1, p + "ffn.fc1");
  auto f = linear(tape.gelu(u), p + "ffn.fc2");
  return tape.layer_norm(tape.add(h1, f), param(tape, p + "ln2.gamma"), param(tape, p + "ln2.beta"));
}

Var Model::head(Tape& tape, const Var& h, const Batch& batch) const {
  tape.set_layer(n_layers());
  auto pooled = tape.mean_pool(h, batch.lengths, batch.seq);
  return tape.add_bias(tape.matmul(pooled, param(tape, param_names::head_weight)), param(tape, param_names::head_bias));
}

ForwardResult Model::forward(const Batch& batch, const ForwardOptions& options) const {
  check_batch(batch);
  if (batch.labels.size() != batch.size) throw std::invalid_argument("batch labels do not match batch size");
  TapeOptions topts;
  topts.grad_enabled = options.grad;
  topts.training = options.training;
  topts.seed = options.seed;
  topts.step = options.step;
  topts.cut_layer = options.cut_layer.value_or(cut_layer());
  ForwardResult result{Tape(topts), Var{}, Var{}};
  Tape& tape = result.tape;
  auto mask = attention_mask(tape, batch);
  Var h = embed(tape, batch);
  for (int i = 0; i < n_layers(); ++i) h = block(tape, h, i, batch, mask, true);
  result.logits = head(tape, h, batch);
  result.loss = tape.cross_entropy_mean(result.logits, batch.labels);
  return result;
}

Tensor Model::valid_rows(const Tensor& h, const Batch& batch) const {
  const std::size_t d = h.cols();
  Tensor out(Shape{batch.valid_rows(), d});
  std::size_t row = 0;
  for (std::size_t b = 0; b < batch.size; ++b) {
    const auto len = static_cast<std::size_t>(batch.lengths[b]);
    std::copy_n(h.raw() + b * batch.seq * d, len * d, out.raw() + row * d);
    row += len;
  }
  return out;
}

ForwardTrace Model::dual_forward(const Batch& batch) const {
  check_batch(batch);
  TapeOptions topts;
  topts.grad_enabled = false;
  topts.training = false;
  Tape tape(topts);
  auto mask = attention_mask(tape, batch);
  Var h = embed(tape, batch);
  ForwardTrace trace;
  for (int i = 0; i < n_layers(); ++i) {
    auto ablated = block(tape, h, i, batch, mask, false);
    trace.original.push_back(valid_rows(ablated.tensor(), batch));
    h = block(tape, h, i, batch, mask, true);
    trace.adapted.push_back(valid_rows(h.tensor(), batch));
  }
  return trace;
}

Tensor Model::adapter_contribution(const Batch& batch, int layer, char proj) const {
  check_batch(batch);
  if (layer < 0 || layer >= n_layers()) throw std::out_of_range("adapter_contribution: no layer " + std::to_string(layer));
  if (proj != 'q' && proj != 'v') throw std::invalid_argument("adapter_contribution: projection must be q or v");
  TapeOptions topts;
  topts.grad_enabled = false;
  Tape tape(topts);
  auto mask = attention_mask(tape, batch);
  Var h = embed(tape, batch);
  for (int i = 0; i < layer; ++i) h = block(tape, h, i, batch, mask, true);
  tape.set_layer(layer);
  auto xa = tape.matmul(h, param(tape, param_names::lora_a(layer, proj)));
  auto xab = tape.matmul(xa, param(tape, param_names::lora_b(layer, proj)));
  return tape.scale(xab, config_.lora_scaling()).tensor();
}

std::vector<Tensor> Model::layer_outputs(const Batch& batch) const {
  check_batch(batch);
  TapeOptions topts;
  topts.grad_enabled = false;
  topts.training = false;
  Tape tape(topts);
  auto mask = attention_mask(tape, batch);
  Var h = embed(tape, batch);
  std::vector<Tensor> out;
  for (int i = 0; i < n_layers(); ++i) {
    h = block(tape, h, i, batch, mask, true);
    out.push_back(valid_rows(h.tensor(), batch));
  }
  return out;
}

EvalResult evaluate(const Model& model, std::span<const Batch> batches) {
  EvalResult out;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  ForwardOptions opts;
  opts.grad = false;
  opts.training = false;
  for (const auto& batch : batches) {
    auto r = model.forward(batch, opts);
    loss_sum += r.loss.tensor().item() * static_cast<double>(batch.size);
    const auto& logits = r.logits.tensor();
    for (std::size_t b = 0; b < batch.size; ++b) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.cols(); ++c) {
        if (logits.at(b, c) > logits.at(b, best)) best = c;
      }
      if (static_cast<std::int64_t>(best) == batch.labels[b]) ++correct;
    }
    out.examples += batch.size;
  }
  if (out.examples > 0) {
    out.loss = loss_sum / static_cast<double>(out.examples);
    out.accuracy = static_cast<double>(correct) / static_cast<double>(out.examples);
  }
  return out;
}

}  // namespace safeft
