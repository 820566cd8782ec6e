#include "safeft/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace safeft {

AdamW::AdamW(AdamWConfig config) : config_(config) {}

void AdamW::add_parameter(const std::string& name, std::shared_ptr<Tensor> param) {
  if (!param) throw std::invalid_argument("AdamW: null parameter " + name);
  Slot slot{param, Tensor(param->shape()), Tensor(param->shape())};
  if (!slots_.emplace(name, std::move(slot)).second) {
    throw std::invalid_argument("AdamW: parameter registered twice: " + name);
  }
}

void AdamW::remove_parameter(const std::string& name) {
  if (slots_.erase(name) == 0) throw std::invalid_argument("AdamW: unknown parameter " + name);
}

void AdamW::step(const GradMap& grads) {
  for (const auto& [name, g] : grads) {
    auto it = slots_.find(name);
    if (it == slots_.end()) {
      throw std::logic_error("AdamW: gradient for non-trainable parameter " + name);
    }
    if (g.shape() != it->second.param->shape()) {
      throw ShapeError("AdamW: gradient shape " + to_string(g.shape()) + " for " + name + " " +
                       to_string(it->second.param->shape()));
    }
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  const double decay = 1.0 - config_.lr * config_.weight_decay;

  for (auto& [name, slot] : slots_) {
    auto p = slot.param->data();
    if (config_.weight_decay != 0.0) {
      for (auto& x : p) x *= decay;
    }
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    auto g = it->second.data();
    auto m = slot.m.data();
    auto v = slot.v.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

std::size_t AdamW::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, slot] : slots_) n += slot.param->numel();
  return n;
}

std::size_t AdamW::moment_bytes() const {
  std::size_t n = 0;
  for (const auto& [name, slot] : slots_) n += slot.m.bytes() + slot.v.bytes();
  return n;
}

}  // namespace safeft
