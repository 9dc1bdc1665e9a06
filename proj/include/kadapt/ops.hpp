// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. All ops are pure: they never modify their
// inputs, and record a backward rule only when recording is required (see
// tensor.hpp).
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "kadapt/tensor.hpp"

namespace kadapt::ops {

inline constexpr double kLayerNormEps = 1e-5;

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [B,m,k] x [B,k,n] -> [B,m,n]
Tensor bmm(const Tensor& a, const Tensor& b);
// [m,n] (x) [p,q] -> [m*p, n*q]
Tensor kron(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x + y where y's shape equals the trailing dims of x (bias rows, position
// tables, per-token biases shared across a batch).
Tensor add_broadcast(const Tensor& x, const Tensor& y);
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// Repeats x `count` times along a new leading axis.
Tensor expand(const Tensor& x, std::size_t count);
// out.flat[i] = table.flat[index[i]], reshaped to `shape`. Backward
// scatter-adds.
Tensor gather(const Tensor& table, std::vector<std::size_t> index, Shape shape);

// Softmax along `axis`; negative axis counts from the end.
Tensor softmax(const Tensor& x, int axis);
// LayerNorm over the last dimension with affine gamma/beta.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta);
Tensor gelu(const Tensor& x);
// Mean negative log-likelihood of log_softmax(logits[b,C]) at labels.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// Depthwise 2-D convolution over a square token grid.
// v: [b, tokens, c], kernel: [c, k, k] with odd k, zero padding. When
// `has_cls` the first token is not part of the grid and is passed through
// unchanged.
Tensor dwconv2d(const Tensor& v, const Tensor& kernel, bool has_cls);

// y = M x for a linear operator M: R^in -> R^out given by matrix-free
// forward and adjoint routines. x is rank 1.
using LinearFn = std::function<void(std::span<const double>, std::span<double>)>;
Tensor linear_map(const Tensor& x, std::size_t out_dim, LinearFn apply,
                  LinearFn apply_adjoint);

// Runs reverse mode from a scalar loss produced on the active tape.
void backward(const Tensor& loss);

}  // namespace kadapt::ops
