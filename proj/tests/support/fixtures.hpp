#pragma once

#include <random>
#include <vector>

#include "safeft/model.hpp"

namespace safeft::testing {

inline ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 16;
  c.max_seq = 8;
  c.n_classes = 3;
  return c;
}

/// Random batch with lengths in [1, seq] and tokens in [1, vocab).
inline Batch random_batch(const ModelConfig& c, std::size_t size, std::size_t seq, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> tok(1, static_cast<std::int64_t>(c.vocab_size) - 1);
  std::uniform_int_distribution<std::int64_t> len(1, static_cast<std::int64_t>(seq));
  std::uniform_int_distribution<std::int64_t> lab(0, static_cast<std::int64_t>(c.n_classes) - 1);
  Batch b;
  b.size = size;
  b.seq = seq;
  b.tokens.assign(size * seq, 0);
  for (std::size_t i = 0; i < size; ++i) {
    const auto l = len(rng);
    b.lengths.push_back(l);
    b.labels.push_back(lab(rng));
    for (std::int64_t t = 0; t < l; ++t) b.tokens[i * seq + static_cast<std::size_t>(t)] = tok(rng);
  }
  return b;
}

/// Fills every adapter B (and perturbs A) so adapters have a visible effect.
inline void perturb_adapters(Model& m, std::uint64_t seed, double scale = 0.3, int only_layer = -1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (int i = 0; i < m.n_layers(); ++i) {
    if (only_layer >= 0 && i != only_layer) continue;
    for (const auto& name : m.adapter_parameter_names(i)) {
      for (double& v : m.mutable_value(name).data()) v += n(rng);
    }
  }
}

}  // namespace safeft::testing
