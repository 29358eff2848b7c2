// SPDX-License-Identifier: Apache-2.0

#include <random>

#include <benchmark/benchmark.h>

#include "fastmem/memory.hpp"
#include "fastmem/optimizers.hpp"
#include "fastmem/reader.hpp"

using namespace fastmem;

namespace {

Matrix<double> gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<double> m(rows, cols);
  for (auto& v : m.values()) v = n(rng);
  return m;
}

MlpParams<double> mlp(std::size_t d, std::size_t h, std::uint64_t seed) {
  auto p = MlpParams<double>::zeros(d, h, d);
  p.w1 = gaussian(d, h, seed);
  p.w2 = gaussian(h, d, seed + 1);
  scale(p, 0.1);
  return p;
}

void gn_matvec_bench(benchmark::State& state, JacobianMode mode) {
  const std::size_t d = static_cast<std::size_t>(state.range(0));
  const auto keys = gaussian(32, d, 1);
  const std::vector<double> eta(32, 1e-4);
  const auto w = mlp(d, 4 * d, 2), v = mlp(d, 4 * d, 3);
  const auto ln = LayerNormParams<double>::identity(d);
  const GaussNewtonOperator<double> op(keys, eta, w, ln, mode, 1e-4);
  for (auto _ : state) benchmark::DoNotOptimize(op(v));
  state.counters["flops"] = static_cast<double>(gn_matvec_flops(d, 4 * d, d, mode));
}

void BM_GnMatvecMlp(benchmark::State& s) { gn_matvec_bench(s, JacobianMode::mlp); }
void BM_GnMatvecLn(benchmark::State& s) { gn_matvec_bench(s, JacobianMode::ln); }

void BM_NewtonSchulz(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto m = gaussian(n, 4 * n, 4);
  for (auto _ : state) benchmark::DoNotOptimize(newton_schulz(m, 5));
}

void BM_HfUpdate(benchmark::State& state) {
  const std::size_t d = 64;
  const auto keys = gaussian(32, d, 5), targets = gaussian(32, d, 6);
  const std::vector<double> eta(32, 1e-4);
  const auto w = mlp(d, 4 * d, 7);
  const auto ln = LayerNormParams<double>::identity(d);
  CgConfig cfg;
  cfg.max_iters = static_cast<std::size_t>(state.range(0));
  cfg.early_stop = false;
  for (auto _ : state) benchmark::DoNotOptimize(hf_update<double>(keys, targets, eta, w, ln, cfg));
}

void BM_AppendAndDiscard(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto base = gaussian(n, 64, 8);
  const auto incoming = gaussian(32, 64, 9);
  std::vector<Provenance> prov(32);
  for (auto _ : state) {
    state.PauseTiming();
    auto mem = MemoryState<double>::empty(n, 64);
    mem.tokens = base;
    mem.provenance.assign(n, Provenance{});
    state.ResumeTiming();
    append_and_discard(mem, incoming, prov);
    benchmark::DoNotOptimize(mem.tokens.values().data());
  }
}

void BM_CompressKv(benchmark::State& state) {
  ToyStackConfig sc;
  const auto stack = ToyStackParams::make(sc);
  const auto memory = gaussian(256, sc.dim, 10);
  const auto prompt = gaussian(8, sc.dim, 11);
  const ReaderBudget budget{64, static_cast<std::size_t>(state.range(0)), 256};
  for (auto _ : state) benchmark::DoNotOptimize(compress_kv(memory, prompt, stack, budget));
}

}  // namespace

BENCHMARK(BM_GnMatvecMlp)->Arg(16)->Arg(64);
BENCHMARK(BM_GnMatvecLn)->Arg(16)->Arg(64);
BENCHMARK(BM_NewtonSchulz)->Arg(16)->Arg(64);
BENCHMARK(BM_HfUpdate)->Arg(1)->Arg(3)->Arg(5);
BENCHMARK(BM_AppendAndDiscard)->Arg(256)->Arg(1024);
BENCHMARK(BM_CompressKv)->Arg(64)->Arg(256);
BENCHMARK_MAIN();
