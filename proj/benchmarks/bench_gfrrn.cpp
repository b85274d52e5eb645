#include <benchmark/benchmark.h>

#include <random>

#include "gfrrn/adapters.hpp"
#include "gfrrn/attention.hpp"
#include "gfrrn/data.hpp"
#include "gfrrn/frequency.hpp"
#include "gfrrn/labels.hpp"
#include "gfrrn/losses.hpp"
#include "gfrrn/metrics.hpp"
#include "gfrrn/training.hpp"

namespace {

using namespace gfrrn;

Tensor noise(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

train::RunConfig tiny(std::size_t size) {
  train::RunConfig c;
  c.network.encoder.channels = {16, 32};
  c.network.encoder.heads = {2, 2};
  c.network.encoder.depths = {1, 1};
  c.network.encoder.window = 4;
  c.network.decoder.channels = 16;
  c.network.decoder.heads = 2;
  c.network.decoder.window = 4;
  c.network.decoder.blocks = 1;
  c.network.decoder.gaflb.channels = 16;
  c.train.image_size = size;
  return c;
}

void BM_UnifiedLabels(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Image t = data::procedural_scene(n, n, 1), i = data::procedural_scene(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(labels::generate_unified_labels(i, t, 2.0));
  state.SetItemsProcessed(state.iterations() * std::int64_t(n * n));
}
BENCHMARK(BM_UnifiedLabels)->Arg(64)->Arg(128)->Arg(256);

void BM_FftLowpassForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Var x = Var::leaf(noise({n, n, 16}, 3), true);
  const Var sigma = Var::leaf(Tensor({2}, {0.4, 0.6}), true);
  for (auto _ : state) {
    x.node()->zero_grad();
    sigma.node()->zero_grad();
    backward(ops::sum(freq::fft_lowpass(x, sigma)));
  }
}
BENCHMARK(BM_FftLowpassForwardBackward)->Arg(32)->Arg(64);

void BM_DaaForward(benchmark::State& state) {
  ParamStore store;
  attn::AttentionConfig cfg;
  cfg.channels = 32;
  cfg.heads = 4;
  const attn::Daa daa(Scope(store, 1, ParamGroup::kTask, "daa"), cfg);
  const Var x = Var::constant(noise({std::size_t(state.range(0)), cfg.tokens(), cfg.channels}, 4));
  const NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(daa.forward(x));
}
BENCHMARK(BM_DaaForward)->Arg(16)->Arg(64);

void BM_MonaForward(benchmark::State& state) {
  ParamStore store;
  const adapters::MonaLayer mona(Scope(store, 1, ParamGroup::kMona, "mona"), 32, 8);
  const Var x = Var::constant(noise({32, 32, 32}, 5));
  const NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(mona.forward(x));
}
BENCHMARK(BM_MonaForward);

void BM_GfrrnInference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  ParamStore store;
  const net::Gfrrn model(store, tiny(n).network, 0);
  const Image img = data::procedural_scene(n, n, 6);
  for (auto _ : state) benchmark::DoNotOptimize(model.infer(img));
}
BENCHMARK(BM_GfrrnInference)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  train::Trainer trainer(tiny(n));
  const data::Sample s = data::synthetic_sample(n, 7);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_step(s));
}
BENCHMARK(BM_TrainStep)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_Ssim(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Image a = data::procedural_scene(n, n, 8), b = data::procedural_scene(n, n, 9);
  for (auto _ : state) benchmark::DoNotOptimize(eval::ssim(a, b));
}
BENCHMARK(BM_Ssim)->Arg(128)->Arg(384);

}  // namespace

BENCHMARK_MAIN();
