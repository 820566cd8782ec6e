#include <benchmark/benchmark.h>

#include <random>

#include "safeft/importance.hpp"
#include "safeft/model.hpp"
#include "safeft/tape.hpp"
#include "support/fixtures.hpp"

using namespace safeft;

namespace {

Tensor gaussian(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = n(rng);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = gaussian({n, n}, 1);
  const auto b = gaussian({n, n}, 2);
  for (auto _ : state) {
    Tape tape(TapeOptions{.grad_enabled = false});
    auto out = tape.matmul(tape.constant(a), tape.constant(b));
    benchmark::DoNotOptimize(out.value);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_Cka(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto x = gaussian({rows, 64}, 3);
  const auto y = gaussian({rows, 64}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(cka(x, y));
}
BENCHMARK(BM_Cka)->Arg(512)->Arg(2048);

void BM_TrainStep(benchmark::State& state) {
  auto config = ModelConfig{};
  config.vocab_size = 16;
  config.max_seq = 8;
  auto model = Model::init(config, 1);
  const int cut = static_cast<int>(state.range(0));
  for (int i = 0; i < cut; ++i) model.set_adapter(i, AdapterState{AdapterStatus::Frozen, 0});
  const auto batch = testing::random_batch(config, 32, 8, 5);
  std::uint64_t step = 0;
  for (auto _ : state) {
    ForwardOptions o;
    o.step = step++;
    auto r = model.forward(batch, o);
    benchmark::DoNotOptimize(r.tape.backward(r.loss));
  }
}
BENCHMARK(BM_TrainStep)->DenseRange(0, 4, 2);

}  // namespace

BENCHMARK_MAIN();
