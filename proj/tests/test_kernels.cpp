// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "kadapt/kernels.hpp"
#include "test_util.hpp"

using namespace kadapt;
using kernels::Exec;
using testing::bit_equal;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

}  // namespace

TEST_CASE("gemm variants match the triple-loop oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 1 + rng.index(40), k = 1 + rng.index(40), n = 1 + rng.index(40);
    auto a = random_vec(rng, m * k);
    auto b = random_vec(rng, k * n);
    auto expect = testing::matmul_oracle(m, k, n, a, b);

    std::vector<double> c(m * n, 5.0);
    kernels::gemm_nn(Exec::serial, m, k, n, a, b, c, false);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(expect[i]).epsilon(1e-12));

    // A^T stored [k,m]; B^T stored [n,k].
    std::vector<double> at(k * m), bt(n * k);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
    std::vector<double> c_tn(m * n, 0.0), c_nt(m * n, 0.0);
    kernels::gemm_tn_acc(Exec::serial, m, k, n, at, b, c_tn);
    kernels::gemm_nt_acc(Exec::serial, m, k, n, a, bt, c_nt);
    for (std::size_t i = 0; i < c.size(); ++i) {
      CHECK(c_tn[i] == doctest::Approx(expect[i]).epsilon(1e-12));
      CHECK(c_nt[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("parallel kernels are bit-identical to the serial reference") {
  Rng rng(11);
  const std::size_t m = 300, k = 64, n = 96, batch = 12;
  auto a = random_vec(rng, m * k), b = random_vec(rng, k * n);
  auto a3 = random_vec(rng, batch * 17 * 16), b3 = random_vec(rng, batch * 16 * 17);
  auto g = random_vec(rng, m * n), bt = random_vec(rng, n * k);
  auto small = random_vec(rng, 24 * 24), blocks = random_vec(rng, 64 * 256);

  auto both = [](auto&& run) {
    auto s = run(Exec::serial);
    auto p = run(Exec::parallel);
    CHECK(bit_equal(s, p));
  };
  both([&](Exec e) {
    std::vector<double> c(m * n);
    kernels::gemm_nn(e, m, k, n, a, b, c, false);
    return c;
  });
  both([&](Exec e) {
    std::vector<double> c(k * n, 0.0);
    kernels::gemm_tn_acc(e, k, m, n, a, g, c);
    return c;
  });
  both([&](Exec e) {
    std::vector<double> c(m * n, 0.0);
    kernels::gemm_nt_acc(e, m, k, n, a, bt, c);
    return c;
  });
  both([&](Exec e) {
    std::vector<double> c(batch * 17 * 17);
    kernels::bmm_nn(e, batch, 17, 16, 17, a3, b3, c, false);
    return c;
  });
  both([&](Exec e) {
    std::vector<double> out(m * k);
    kernels::softmax_rows(e, m, k, a, out);
    return out;
  });
  both([&](Exec e) {
    std::vector<double> out(m * k), xhat(m * k), rstd(m);
    std::vector<double> gamma(k, 1.5), beta(k, -0.25);
    kernels::layernorm_rows(e, m, k, a, gamma, beta, 1e-5, out, xhat, rstd);
    return out;
  });
  both([&](Exec e) {
    std::vector<double> out(a.size());
    kernels::gelu(e, a, out);
    return out;
  });
  both([&](Exec e) {
    std::vector<double> out(24 * 24 * 24 * 24);
    kernels::kron(e, 24, 24, small, 24, 24, small, out);
    return out;
  });
  both([&](Exec e) {
    auto data = blocks;
    kernels::fwht_blocks(e, data, 256, 64);
    return data;
  });
}

TEST_CASE("fast Walsh-Hadamard equals the explicit Hadamard matrix") {
  Rng rng(21);
  for (std::size_t len = 1; len <= 64; len <<= 1) {
    auto x = random_vec(rng, len);
    // Sylvester construction: H[i][j] = (-1)^popcount(i & j).
    std::vector<double> expect(len, 0.0);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < len; ++j)
        expect[i] += (__builtin_popcountll(i & j) % 2 ? -1.0 : 1.0) * x[j];
    kernels::fwht_blocks(Exec::serial, x, len, 1);
    for (std::size_t i = 0; i < len; ++i) CHECK(x[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}
