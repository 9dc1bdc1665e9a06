// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major kernels used by the autodiff engine.
//
// Every kernel takes an execution policy. `Exec::serial` is the reference
// implementation; `Exec::parallel` distributes independent output rows over
// OpenMP threads. Each output element is produced by exactly one thread with
// the same arithmetic order as the serial loop, so both policies agree bit
// for bit regardless of thread count.
#pragma once

#include <cstddef>
#include <span>

namespace kadapt::kernels {

enum class Exec { serial, parallel };

// Policy used by the tensor ops. Tests and the benchmark pick explicitly.
inline constexpr Exec kDefaultExec = Exec::parallel;

// C[m,n] (+)= A[m,k] * B[k,n]
void gemm_nn(Exec exec, std::size_t m, std::size_t k, std::size_t n,
             std::span<const double> a, std::span<const double> b,
             std::span<double> c, bool accumulate);

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn_acc(Exec exec, std::size_t m, std::size_t k, std::size_t n,
                 std::span<const double> a, std::span<const double> b,
                 std::span<double> c);

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt_acc(Exec exec, std::size_t m, std::size_t k, std::size_t n,
                 std::span<const double> a, std::span<const double> b,
                 std::span<double> c);

// Batched forms of the three products above; operands are contiguous per
// batch entry.
void bmm_nn(Exec exec, std::size_t batch, std::size_t m, std::size_t k,
            std::size_t n, std::span<const double> a,
            std::span<const double> b, std::span<double> c, bool accumulate);
void bmm_tn_acc(Exec exec, std::size_t batch, std::size_t m, std::size_t k,
                std::size_t n, std::span<const double> a,
                std::span<const double> b, std::span<double> c);
void bmm_nt_acc(Exec exec, std::size_t batch, std::size_t m, std::size_t k,
                std::size_t n, std::span<const double> a,
                std::span<const double> b, std::span<double> c);

// out[m*p, n*q] = A[m,n] (x) B[p,q]; block (i,j) of out is a_ij * B.
void kron(Exec exec, std::size_t m, std::size_t n, std::span<const double> a,
          std::size_t p, std::size_t q, std::span<const double> b,
          std::span<double> out);

// Row softmax with max subtraction over `rows` contiguous rows of `len`.
void softmax_rows(Exec exec, std::size_t rows, std::size_t len,
                  std::span<const double> x, std::span<double> y);

// LayerNorm over contiguous rows. Also writes the normalized input `xhat`
// and the per-row reciprocal standard deviation for the backward pass.
void layernorm_rows(Exec exec, std::size_t rows, std::size_t len,
                    std::span<const double> x, std::span<const double> gamma,
                    std::span<const double> beta, double eps,
                    std::span<double> y, std::span<double> xhat,
                    std::span<double> rstd);

// GELU, exact erf form.
void gelu(Exec exec, std::span<const double> x, std::span<double> y);

// In-place unnormalized Walsh-Hadamard transform of `blocks` contiguous
// blocks, each of power-of-two length `block_len`.
void fwht_blocks(Exec exec, std::span<double> data, std::size_t block_len,
                 std::size_t blocks);

}  // namespace kadapt::kernels
