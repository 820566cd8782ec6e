#include <gtest/gtest.h>

#include <random>

#include "safeft/resource_model.hpp"
#include "support/fixtures.hpp"

using namespace safeft;
using namespace safeft::testing;

namespace {

struct Measured {
  std::size_t retained;
  std::uint64_t forward;
  std::uint64_t backward;
  std::size_t grads;
};

Model with_mask(const ModelConfig& c, const std::vector<bool>& mask, std::uint64_t seed) {
  auto m = Model::init(c, seed);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) m.set_adapter(static_cast<int>(i), AdapterState{AdapterStatus::Frozen, 0});
  }
  return m;
}

Measured measure(const Model& m, const Batch& b) {
  ForwardOptions o;
  o.seed = 2;
  auto r = m.forward(b, o);
  const auto retained = r.tape.retained_bytes();
  const auto fwd = r.tape.forward_flops();
  const auto g = r.tape.backward(r.loss);
  return {retained, fwd, r.tape.backward_flops(), g.size()};
}

std::vector<bool> all(int n, bool v) { return std::vector<bool>(static_cast<std::size_t>(n), v); }

}  // namespace

TEST(ResourceModel, MatchesEngineOnRandomConfigurations) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig c;
    c.n_layers = 1 + static_cast<int>(rng() % 4);
    c.n_heads = 1 + rng() % 3;
    c.d_model = c.n_heads * (2 + rng() % 5);
    c.d_ff = 4 + rng() % 20;
    c.vocab_size = 5 + rng() % 20;
    c.max_seq = 2 + rng() % 9;
    c.lora_rank = 1 + rng() % 4;
    c.lora_dropout = (trial % 2 == 0) ? 0.1 : 0.0;
    c.n_classes = 2 + rng() % 3;
    c.validate();
    std::vector<bool> mask(static_cast<std::size_t>(c.n_layers));
    for (auto&& f : mask) f = (rng() % 2) == 0;
    const std::size_t batch = 1 + rng() % 5;
    const std::size_t seq = 1 + rng() % c.max_seq;
    const auto m = with_mask(c, mask, trial);
    const auto got = measure(m, random_batch(c, batch, seq, 100 + trial));
    const auto cost = step_cost(c, mask, batch, seq);
    EXPECT_EQ(got.retained, modeled_activation_bytes(c, mask, batch, seq)) << "trial " << trial;
    EXPECT_EQ(got.retained, cost.activation_bytes);
    EXPECT_EQ(got.forward, cost.forward_flops) << "trial " << trial;
    EXPECT_EQ(got.backward, cost.backward_flops) << "trial " << trial;
    const auto f = flops_per_step(c, mask, batch, seq);
    EXPECT_EQ(f.forward, cost.forward_flops);
    EXPECT_EQ(f.backward, cost.backward_flops);
    EXPECT_EQ(cut_from_mask(mask), m.cut_layer());
  }
}

TEST(ResourceModel, AllFrozenLeavesOnlyHead) {
  const auto c = small_config();
  const auto frozen = all(c.n_layers, true);
  const auto b = random_batch(c, 4, 8, 1);
  const auto got = measure(with_mask(c, frozen, 1), b);
  EXPECT_EQ(got.grads, 2u);
  EXPECT_EQ(got.retained, modeled_activation_bytes(c, frozen, 4, 8));
  EXPECT_LT(got.retained, modeled_activation_bytes(c, all(c.n_layers, false), 4, 8) / 10);
  EXPECT_EQ(trainable_parameter_count(c, frozen), c.d_model * c.n_classes + c.n_classes);
  EXPECT_EQ(cut_from_mask(frozen), c.n_layers);
}

TEST(ResourceModel, CutStepsAreUniformOnUniformStack) {
  ModelConfig c = small_config();
  c.n_layers = 6;
  const auto b = random_batch(c, 8, 8, 3);
  std::vector<double> bytes, backward;
  std::uint64_t forward = 0;
  for (int cut = 0; cut <= c.n_layers; ++cut) {
    std::vector<bool> mask(6, false);
    for (int i = 0; i < cut; ++i) mask[static_cast<std::size_t>(i)] = true;
    const auto got = measure(with_mask(c, mask, 1), b);
    EXPECT_EQ(got.retained, modeled_activation_bytes(c, mask, 8, 8));
    EXPECT_EQ(got.backward, flops_per_step(c, mask, 8, 8).backward);
    if (cut == 0) forward = got.forward;
    EXPECT_EQ(got.forward, forward);
    bytes.push_back(static_cast<double>(got.retained));
    backward.push_back(static_cast<double>(got.backward));
  }
  for (int k = 1; k + 1 < c.n_layers; ++k) {
    EXPECT_EQ(bytes[0] - bytes[1], bytes[static_cast<std::size_t>(k)] - bytes[static_cast<std::size_t>(k) + 1]);
    EXPECT_EQ(backward[0] - backward[1],
              backward[static_cast<std::size_t>(k)] - backward[static_cast<std::size_t>(k) + 1]);
  }
  const double head = bytes[6];
  EXPECT_NEAR((bytes[3] - head) / (bytes[0] - head), 0.5, 0.05);
  EXPECT_NEAR((backward[3] - backward[6]) / (backward[0] - backward[6]), 0.5, 0.05);
}

TEST(ResourceModel, MonotoneInFrozenSet) {
  const auto c = small_config();
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<bool> mask(4);
    for (auto&& f : mask) f = (rng() % 2) == 0;
    for (std::size_t i = 0; i < 4; ++i) {
      if (mask[i]) continue;
      auto more = mask;
      more[i] = true;
      EXPECT_LE(modeled_activation_bytes(c, more, 4, 8), modeled_activation_bytes(c, mask, 4, 8));
      EXPECT_LE(flops_per_step(c, more, 4, 8).backward, flops_per_step(c, mask, 4, 8).backward);
      EXPECT_EQ(flops_per_step(c, more, 4, 8).forward, flops_per_step(c, mask, 4, 8).forward);
      EXPECT_LT(trainable_parameter_count(c, more), trainable_parameter_count(c, mask));
    }
  }
}

TEST(ResourceModel, EpochReportTracksOptimizerBytes) {
  auto m = Model::init(small_config(), 1);
  const auto before = epoch_report(0, m, 4, 8);
  EXPECT_EQ(before.optimizer_bytes, 16 * before.trainable_parameter_count);
  EXPECT_EQ(before.gradient_bytes, 8 * before.trainable_parameter_count);
  EXPECT_EQ(before.parameter_bytes, m.parameter_bytes());
  EXPECT_EQ(before.cut_layer, 0);
  m.set_adapter(2, AdapterState{AdapterStatus::Frozen, 1});
  const auto after = epoch_report(1, m, 4, 8);
  EXPECT_EQ(before.optimizer_bytes - after.optimizer_bytes, 16 * m.adapter_parameter_count(2));
  EXPECT_EQ(after.cut_layer, 0);
  EXPECT_LT(after.activation_bytes, before.activation_bytes);
  EXPECT_EQ(after.activation_bytes, modeled_activation_bytes(m.config(), m.frozen_mask(), 4, 8));
  EXPECT_LT(after.backward_flops, before.backward_flops);
  const auto again = epoch_report(0, Model::init(small_config(), 1), 4, 8);
  EXPECT_EQ(again, before);
}
