// SPDX-License-Identifier: Apache-2.0
//
// Serial reference vs OpenMP kernels. The second benchmark argument selects
// the policy: 0 serial, 1 parallel.
#include <benchmark/benchmark.h>

#include <vector>

#include "kadapt/kernels.hpp"
#include "kadapt/random.hpp"

namespace k = kadapt::kernels;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t stream) {
  kadapt::Rng rng(42, stream);
  auto t = rng.uniform_tensor({n}, 1.0);
  return {t.values().begin(), t.values().end()};
}

k::Exec policy(const benchmark::State& state) { return state.range(1) ? k::Exec::parallel : k::Exec::serial; }

void BM_gemm_nn(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    k::gemm_nn(policy(state), n, n, n, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

void BM_bmm_nt(benchmark::State& state) {
  // Attention scores: batch of heads, [seq, head_dim] x [seq, head_dim]^T.
  const auto batch = static_cast<std::size_t>(state.range(0));
  const std::size_t seq = 17, dim = 16;
  const auto a = random_values(batch * seq * dim, 3), b = random_values(batch * seq * dim, 4);
  std::vector<double> c(batch * seq * seq);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.0);
    k::bmm_nt_acc(policy(state), batch, seq, dim, seq, a, b, c);
    benchmark::DoNotOptimize(c.data());
  }
}

void BM_kron(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 5), b = random_values(n * n, 6);
  std::vector<double> out(n * n * n * n);
  for (auto _ : state) {
    k::kron(policy(state), n, n, a, n, n, b, out);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_softmax_rows(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t len = 17;
  const auto x = random_values(rows * len, 7);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    k::softmax_rows(policy(state), rows, len, x, y);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_layernorm_rows(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t len = 64;
  const auto x = random_values(rows * len, 8), gamma = random_values(len, 9), beta = random_values(len, 10);
  std::vector<double> y(x.size()), xhat(x.size()), rstd(rows);
  for (auto _ : state) {
    k::layernorm_rows(policy(state), rows, len, x, gamma, beta, 1e-6, y, xhat, rstd);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_gelu(benchmark::State& state) {
  const auto x = random_values(static_cast<std::size_t>(state.range(0)), 11);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    k::gelu(policy(state), x, y);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_fwht_blocks(benchmark::State& state) {
  const auto blocks = static_cast<std::size_t>(state.range(0));
  const std::size_t len = 1024;
  auto data = random_values(blocks * len, 12);
  for (auto _ : state) {
    k::fwht_blocks(policy(state), data, len, blocks);
    benchmark::DoNotOptimize(data.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm_nn)->ArgsProduct({{32, 128, 256}, {0, 1}});
BENCHMARK(BM_bmm_nt)->ArgsProduct({{40, 640}, {0, 1}});
BENCHMARK(BM_kron)->ArgsProduct({{8, 24}, {0, 1}});
BENCHMARK(BM_softmax_rows)->ArgsProduct({{680, 10880}, {0, 1}});
BENCHMARK(BM_layernorm_rows)->ArgsProduct({{170, 2720}, {0, 1}});
BENCHMARK(BM_gelu)->ArgsProduct({{1 << 12, 1 << 18}, {0, 1}});
BENCHMARK(BM_fwht_blocks)->ArgsProduct({{4, 64}, {0, 1}});

BENCHMARK_MAIN();
