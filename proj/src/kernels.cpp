// SPDX-License-Identifier: Apache-2.0
#include "kadapt/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace kadapt::kernels {
namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelGrain = 1 << 14;

// Runs body(i) for i in [0, count). Iterations must write disjoint outputs.
template <typename Body>
void for_rows(Exec exec, std::size_t count, std::size_t work_per_row,
              Body&& body) {
  const auto n = static_cast<std::int64_t>(count);
  if (exec == Exec::serial || count < 2 ||
      count * work_per_row < kParallelGrain) {
    for (std::int64_t i = 0; i < n; ++i) body(static_cast<std::size_t>(i));
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) body(static_cast<std::size_t>(i));
}

// One output row of C = A*B: c_row (+)= sum_p a_row[p] * B[p,:].
inline void gemm_row(std::size_t k, std::size_t n, const double* a_row,
                     const double* b, double* c_row, bool accumulate) {
  if (!accumulate) std::fill(c_row, c_row + n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a_row[p];
    const double* b_row = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
  }
}

// Row i of C += A^T B with A stored [k,m].
inline void gemm_tn_row(std::size_t i, std::size_t m, std::size_t k,
                        std::size_t n, const double* a, const double* b,
                        double* c_row) {
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a[p * m + i];
    const double* b_row = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
  }
}

void transpose_into(std::size_t rows, std::size_t cols, const double* src,
                    double* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

void fwht_one(double* x, std::size_t len) {
  for (std::size_t h = 1; h < len; h <<= 1) {
    for (std::size_t i = 0; i < len; i += h << 1) {
      for (std::size_t j = i; j < i + h; ++j) {
        const double u = x[j];
        const double v = x[j + h];
        x[j] = u + v;
        x[j + h] = u - v;
      }
    }
  }
}

}  // namespace

void gemm_nn(Exec exec, std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate) {
  for_rows(exec, m, k * n, [&](std::size_t i) {
    gemm_row(k, n, a.data() + i * k, b.data(), c.data() + i * n, accumulate);
  });
}

void gemm_tn_acc(Exec exec, std::size_t m, std::size_t k, std::size_t n,
                 std::span<const double> a, std::span<const double> b,
                 std::span<double> c) {
  for_rows(exec, m, k * n, [&](std::size_t i) {
    gemm_tn_row(i, m, k, n, a.data(), b.data(), c.data() + i * n);
  });
}

void gemm_nt_acc(Exec exec, std::size_t m, std::size_t k, std::size_t n,
                 std::span<const double> a, std::span<const double> b,
                 std::span<double> c) {
  // B is [n,k]; materialize B^T [k,n] so the inner loop stays contiguous.
  std::vector<double> bt(k * n);
  transpose_into(n, k, b.data(), bt.data());
  for_rows(exec, m, k * n, [&](std::size_t i) {
    gemm_row(k, n, a.data() + i * k, bt.data(), c.data() + i * n, true);
  });
}

void bmm_nn(Exec exec, std::size_t batch, std::size_t m, std::size_t k,
            std::size_t n, std::span<const double> a,
            std::span<const double> b, std::span<double> c, bool accumulate) {
  for_rows(exec, batch * m, k * n, [&](std::size_t row) {
    const std::size_t e = row / m;
    const std::size_t i = row % m;
    gemm_row(k, n, a.data() + e * m * k + i * k, b.data() + e * k * n,
             c.data() + e * m * n + i * n, accumulate);
  });
}

void bmm_tn_acc(Exec exec, std::size_t batch, std::size_t m, std::size_t k,
                std::size_t n, std::span<const double> a,
                std::span<const double> b, std::span<double> c) {
  for_rows(exec, batch * m, k * n, [&](std::size_t row) {
    const std::size_t e = row / m;
    const std::size_t i = row % m;
    gemm_tn_row(i, m, k, n, a.data() + e * k * m, b.data() + e * k * n,
                c.data() + e * m * n + i * n);
  });
}

void bmm_nt_acc(Exec exec, std::size_t batch, std::size_t m, std::size_t k,
                std::size_t n, std::span<const double> a,
                std::span<const double> b, std::span<double> c) {
  std::vector<double> bt(batch * k * n);
  for (std::size_t e = 0; e < batch; ++e)
    transpose_into(n, k, b.data() + e * n * k, bt.data() + e * k * n);
  for_rows(exec, batch * m, k * n, [&](std::size_t row) {
    const std::size_t e = row / m;
    const std::size_t i = row % m;
    gemm_row(k, n, a.data() + e * m * k + i * k, bt.data() + e * k * n,
             c.data() + e * m * n + i * n, true);
  });
}

void kron(Exec exec, std::size_t m, std::size_t n, std::span<const double> a,
          std::size_t p, std::size_t q, std::span<const double> b,
          std::span<double> out) {
  const std::size_t out_cols = n * q;
  for_rows(exec, m * p, out_cols, [&](std::size_t row) {
    const std::size_t i = row / p;
    const std::size_t r = row % p;
    double* dst = out.data() + row * out_cols;
    const double* b_row = b.data() + r * q;
    for (std::size_t j = 0; j < n; ++j) {
      const double aij = a[i * n + j];
      for (std::size_t s = 0; s < q; ++s) dst[j * q + s] = aij * b_row[s];
    }
  });
}

void softmax_rows(Exec exec, std::size_t rows, std::size_t len,
                  std::span<const double> x, std::span<double> y) {
  for_rows(exec, rows, len * 8, [&](std::size_t r) {
    const double* xr = x.data() + r * len;
    double* yr = y.data() + r * len;
    const double mx = *std::max_element(xr, xr + len);
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < len; ++j) yr[j] *= inv;
  });
}

void layernorm_rows(Exec exec, std::size_t rows, std::size_t len,
                    std::span<const double> x, std::span<const double> gamma,
                    std::span<const double> beta, double eps,
                    std::span<double> y, std::span<double> xhat,
                    std::span<double> rstd) {
  for_rows(exec, rows, len * 4, [&](std::size_t r) {
    const double* xr = x.data() + r * len;
    double mean = 0.0;
    for (std::size_t j = 0; j < len; ++j) mean += xr[j];
    mean /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const double dv = xr[j] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(len);
    const double inv = 1.0 / std::sqrt(var + eps);
    rstd[r] = inv;
    double* hr = xhat.data() + r * len;
    double* yr = y.data() + r * len;
    for (std::size_t j = 0; j < len; ++j) {
      hr[j] = (xr[j] - mean) * inv;
      yr[j] = hr[j] * gamma[j] + beta[j];
    }
  });
}

void gelu(Exec exec, std::span<const double> x, std::span<double> y) {
  constexpr std::size_t kChunk = 1024;
  const std::size_t chunks = (x.size() + kChunk - 1) / kChunk;
  for_rows(exec, chunks, kChunk * 16, [&](std::size_t c) {
    const std::size_t end = std::min(x.size(), (c + 1) * kChunk);
    for (std::size_t i = c * kChunk; i < end; ++i)
      y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * M_SQRT1_2));
  });
}

void fwht_blocks(Exec exec, std::span<double> data, std::size_t block_len,
                 std::size_t blocks) {
  std::size_t log_len = 0;
  while ((std::size_t{1} << log_len) < block_len) ++log_len;
  for_rows(exec, blocks, block_len * std::max<std::size_t>(log_len, 1),
           [&](std::size_t blk) { fwht_one(data.data() + blk * block_len, block_len); });
}

}  // namespace kadapt::kernels
