// SPDX-License-Identifier: Apache-2.0
#include "kadapt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "kadapt/kernels.hpp"

namespace kadapt::ops {
namespace {

using kernels::kDefaultExec;

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                   " vs " + shape_str(b.shape()));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
  }
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// outer x len x inner view of a shape around `axis`.
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) mismatch("matmul", a, b);
  Tensor out(Shape{m, n});
  kernels::gemm_nn(kDefaultExec, m, k, n, a.values(), b.values(),
                   out.mutable_values(), false);
  if (detail::needs_record({&a, &b})) {
    detail::record(out, {a, b}, [a, b, m, k, n](std::span<const double> g) {
      if (a.requires_grad())
        kernels::gemm_nt_acc(kDefaultExec, m, n, k, g, b.values(), detail::grad_of(a));
      if (b.requires_grad())
        kernels::gemm_tn_acc(kDefaultExec, k, m, n, a.values(), g, detail::grad_of(b));
    });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != batch || b.dim(1) != k) mismatch("bmm", a, b);
  Tensor out(Shape{batch, m, n});
  kernels::bmm_nn(kDefaultExec, batch, m, k, n, a.values(), b.values(),
                  out.mutable_values(), false);
  if (detail::needs_record({&a, &b})) {
    detail::record(out, {a, b}, [a, b, batch, m, k, n](std::span<const double> g) {
      if (a.requires_grad())
        kernels::bmm_nt_acc(kDefaultExec, batch, m, n, k, g, b.values(),
                            detail::grad_of(a));
      if (b.requires_grad())
        kernels::bmm_tn_acc(kDefaultExec, batch, k, m, n, a.values(), g,
                            detail::grad_of(b));
    });
  }
  return out;
}

Tensor kron(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("kron: both operands must be matrices, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(0), q = b.dim(1);
  Tensor out(Shape{m * p, n * q});
  kernels::kron(kDefaultExec, m, n, a.values(), p, q, b.values(), out.mutable_values());
  if (detail::needs_record({&a, &b})) {
    detail::record(out, {a, b}, [a, b, m, n, p, q](std::span<const double> g) {
      const std::size_t cols = n * q;
      auto av = a.values();
      auto bv = b.values();
      std::span<double> ga, gb;
      if (a.requires_grad()) ga = detail::grad_of(a);
      if (b.requires_grad()) gb = detail::grad_of(b);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t r = 0; r < p; ++r) {
            const double* grow = g.data() + (i * p + r) * cols + j * q;
            for (std::size_t s = 0; s < q; ++s) {
              if (!ga.empty()) acc += grow[s] * bv[r * q + s];
              if (!gb.empty()) gb[r * q + s] += grow[s] * av[i * n + j];
            }
          }
          if (!ga.empty()) ga[i * n + j] += acc;
        }
      }
    });
  }
  return out;
}

namespace {

template <typename F>
Tensor elementwise(const char* name, const Tensor& a, const Tensor& b, F f) {
  if (a.shape() != b.shape()) mismatch(name, a, b);
  std::vector<double> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  return Tensor(a.shape(), std::move(out));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = elementwise("add", a, b, [](double x, double y) { return x + y; });
  if (detail::needs_record({&a, &b})) {
    detail::record(out, {a, b}, [a, b](std::span<const double> g) {
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = detail::grad_of(*t);
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out = elementwise("sub", a, b, [](double x, double y) { return x - y; });
  if (detail::needs_record({&a, &b})) {
    detail::record(out, {a, b}, [a, b](std::span<const double> g) {
      if (a.requires_grad()) {
        auto ga = detail::grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = detail::grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor out = elementwise("mul", a, b, [](double x, double y) { return x * y; });
  if (detail::needs_record({&a, &b})) {
    detail::record(out, {a, b}, [a, b](std::span<const double> g) {
      if (a.requires_grad()) {
        auto ga = detail::grad_of(a);
        auto bv = b.values();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = detail::grad_of(b);
        auto av = a.values();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

Tensor add_broadcast(const Tensor& x, const Tensor& y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (ys.size() > xs.size() ||
      !std::equal(ys.begin(), ys.end(), xs.end() - static_cast<std::ptrdiff_t>(ys.size()))) {
    mismatch("add_broadcast", x, y);
  }
  const std::size_t inner = y.numel();
  const std::size_t outer = x.numel() / inner;
  std::vector<double> out(x.numel());
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = xv[o * inner + i] + yv[i];
  Tensor result(xs, std::move(out));
  if (detail::needs_record({&x, &y})) {
    detail::record(result, {x, y}, [x, y, outer, inner](std::span<const double> g) {
      if (x.requires_grad()) {
        auto gx = detail::grad_of(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (y.requires_grad()) {
        auto gy = detail::grad_of(y);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) gy[i] += g[o * inner + i];
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= factor;
  Tensor result(x.shape(), std::move(out));
  if (detail::needs_record({&x})) {
    detail::record(result, {x}, [x, factor](std::span<const double> g) {
      auto gx = detail::grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tensor result = Tensor::scalar(total);
  if (detail::needs_record({&x})) {
    detail::record(result, {x}, [x](std::span<const double> g) {
      auto gx = detail::grad_of(x);
      for (auto& v : gx) v += g[0];
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor transpose(const Tensor& x) {
  require_rank("transpose", x, 2);
  return permute(x, {1, 0});
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.rank();
  if (order.size() != rank) {
    throw ShapeError("permute: order has " + std::to_string(order.size()) +
                     " axes for tensor " + shape_str(x.shape()));
  }
  std::vector<bool> seen(rank, false);
  for (auto ax : order) {
    if (ax >= rank || seen[ax]) throw ShapeError("permute: invalid axis order");
    seen[ax] = true;
  }
  const auto& in_shape = x.shape();
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[order[i]];
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];

  // src_index[i] = input offset of output element i.
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < rank; ++d) off += idx[d] * in_strides[order[d]];
    src[flat] = off;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  std::vector<double> out(n);
  auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[src[i]];
  Tensor result(out_shape, std::move(out));
  if (detail::needs_record({&x})) {
    detail::record(result, {x}, [x, src = std::move(src)](std::span<const double> g) {
      auto gx = detail::grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[src[i]] += g[i];
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  Tensor result(std::move(shape), x.to_vector());
  if (detail::needs_record({&x})) {
    detail::record(result, {x}, [x](std::span<const double> g) {
      auto gx = detail::grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return result;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length) {
  if (axis >= x.rank() || length == 0 || start + length > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") invalid on axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const auto v = axis_view(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<double> out(v.outer * length * v.inner);
  auto xv = x.values();
  for (std::size_t o = 0; o < v.outer; ++o) {
    const double* src = xv.data() + (o * v.len + start) * v.inner;
    std::copy(src, src + length * v.inner, out.data() + o * length * v.inner);
  }
  Tensor result(out_shape, std::move(out));
  if (detail::needs_record({&x})) {
    detail::record(result, {x}, [x, v, start, length](std::span<const double> g) {
      auto gx = detail::grad_of(x);
      for (std::size_t o = 0; o < v.outer; ++o) {
        double* dst = gx.data() + (o * v.len + start) * v.inner;
        const double* src = g.data() + o * length * v.inner;
        for (std::size_t i = 0; i < length * v.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return result;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) mismatch("concat", parts[0], p);
    total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  const auto ov = axis_view(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(axis);
    auto pv = p.values();
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy(pv.data() + o * len * ov.inner, pv.data() + (o + 1) * len * ov.inner,
                out.data() + (o * total + offset) * ov.inner);
    }
    offset += len;
  }
  Tensor result(out_shape, std::move(out));
  if (detail::needs_record(parts)) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    detail::record(result, inputs,
                   [inputs, offsets, ov, total, axis](std::span<const double> g) {
                     for (std::size_t k = 0; k < inputs.size(); ++k) {
                       const Tensor& p = inputs[k];
                       if (!p.requires_grad()) continue;
                       auto gp = detail::grad_of(p);
                       const std::size_t len = p.dim(axis);
                       for (std::size_t o = 0; o < ov.outer; ++o) {
                         const double* src = g.data() + (o * total + offsets[k]) * ov.inner;
                         double* dst = gp.data() + o * len * ov.inner;
                         for (std::size_t i = 0; i < len * ov.inner; ++i) dst[i] += src[i];
                       }
                     }
                   });
  }
  return result;
}

Tensor expand(const Tensor& x, std::size_t count) {
  if (count == 0) throw ShapeError("expand: count must be positive");
  Shape out_shape{count};
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  std::vector<double> out;
  out.reserve(count * x.numel());
  for (std::size_t c = 0; c < count; ++c)
    out.insert(out.end(), x.values().begin(), x.values().end());
  Tensor result(out_shape, std::move(out));
  if (detail::needs_record({&x})) {
    detail::record(result, {x}, [x, count](std::span<const double> g) {
      auto gx = detail::grad_of(x);
      const std::size_t n = gx.size();
      for (std::size_t c = 0; c < count; ++c)
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[c * n + i];
    });
  }
  return result;
}

Tensor gather(const Tensor& table, std::vector<std::size_t> index, Shape shape) {
  if (shape_numel(shape) != index.size()) {
    throw ShapeError("gather: index count does not match " + shape_str(shape));
  }
  auto tv = table.values();
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= tv.size()) {
      throw std::out_of_range("gather: index " + std::to_string(index[i]) +
                              " outside table of " + std::to_string(tv.size()));
    }
    out[i] = tv[index[i]];
  }
  Tensor result(std::move(shape), std::move(out));
  if (detail::needs_record({&table})) {
    detail::record(result, {table},
                   [table, index = std::move(index)](std::span<const double> g) {
                     auto gt = detail::grad_of(table);
                     for (std::size_t i = 0; i < g.size(); ++i) gt[index[i]] += g[i];
                   });
  }
  return result;
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto v = axis_view(x.shape(), ax);
  std::vector<double> out(x.numel());
  if (v.inner == 1) {
    kernels::softmax_rows(kDefaultExec, v.outer, v.len, x.values(), out);
  } else {
    auto xv = x.values();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.len * v.inner + i;
        double mx = xv[base];
        for (std::size_t j = 1; j < v.len; ++j) mx = std::max(mx, xv[base + j * v.inner]);
        double total = 0.0;
        for (std::size_t j = 0; j < v.len; ++j) {
          out[base + j * v.inner] = std::exp(xv[base + j * v.inner] - mx);
          total += out[base + j * v.inner];
        }
        for (std::size_t j = 0; j < v.len; ++j) out[base + j * v.inner] /= total;
      }
    }
  }
  Tensor result(x.shape(), std::move(out));
  if (detail::needs_record({&x})) {
    detail::record(result, {x}, [x, result_values = result, v](std::span<const double> g) {
      auto y = result_values.values();
      auto gx = detail::grad_of(x);
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t base = o * v.len * v.inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < v.len; ++j)
            dot += g[base + j * v.inner] * y[base + j * v.inner];
          for (std::size_t j = 0; j < v.len; ++j) {
            const std::size_t at = base + j * v.inner;
            gx[at] += y[at] * (g[at] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::size_t n = x.shape().back();
  if (gamma.shape() != Shape{n}) mismatch("layernorm", x, gamma);
  if (beta.shape() != Shape{n}) mismatch("layernorm", x, beta);
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel()), xhat(x.numel()), rstd(rows);
  kernels::layernorm_rows(kDefaultExec, rows, n, x.values(), gamma.values(),
                          beta.values(), kLayerNormEps, out, xhat, rstd);
  Tensor result(x.shape(), std::move(out));
  if (detail::needs_record({&x, &gamma, &beta})) {
    detail::record(result, {x, gamma, beta},
                   [x, gamma, beta, rows, n, xhat = std::move(xhat),
                    rstd = std::move(rstd)](std::span<const double> g) {
                     auto gv = gamma.values();
                     if (x.requires_grad()) {
                       auto gx = detail::grad_of(x);
                       std::vector<double> dxhat(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* gr = g.data() + r * n;
                         const double* hr = xhat.data() + r * n;
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t j = 0; j < n; ++j) {
                           dxhat[j] = gr[j] * gv[j];
                           s1 += dxhat[j];
                           s2 += dxhat[j] * hr[j];
                         }
                         const double k = rstd[r] / static_cast<double>(n);
                         for (std::size_t j = 0; j < n; ++j) {
                           gx[r * n + j] += k * (static_cast<double>(n) * dxhat[j] - s1 - hr[j] * s2);
                         }
                       }
                     }
                     if (gamma.requires_grad()) {
                       auto gg = detail::grad_of(gamma);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
                     }
                     if (beta.requires_grad()) {
                       auto gb = detail::grad_of(beta);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
                     }
                   });
  }
  return result;
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  kernels::gelu(kDefaultExec, x.values(), out);
  Tensor result(x.shape(), std::move(out));
  if (detail::needs_record({&x})) {
    detail::record(result, {x}, [x](std::span<const double> g) {
      auto gx = detail::grad_of(x);
      auto xv = x.values();
      constexpr double kInvSqrt2Pi = 0.3989422804014327;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(xv[i] * M_SQRT1_2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv[i] * xv[i]);
        gx[i] += g[i] * (cdf + xv[i] * pdf);
      }
    });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t b = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != b) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + shape_str(logits.shape()));
  }
  std::vector<double> probs(logits.numel());
  kernels::softmax_rows(kDefaultExec, b, classes, logits.values(), probs);
  auto lv = logits.values();
  double loss = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] >= classes) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[r]) +
                              " outside [0, " + std::to_string(classes) + ")");
    }
    const double* row = lv.data() + r * classes;
    const double mx = *std::max_element(row, row + classes);
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
    loss -= row[labels[r]] - mx - std::log(total);
  }
  loss /= static_cast<double>(b);
  Tensor result = Tensor::scalar(loss);
  if (detail::needs_record({&logits})) {
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    detail::record(result, {logits},
                   [logits, probs = std::move(probs), lab = std::move(lab), b,
                    classes](std::span<const double> g) {
                     auto gl = detail::grad_of(logits);
                     const double k = g[0] / static_cast<double>(b);
                     for (std::size_t r = 0; r < b; ++r) {
                       for (std::size_t c = 0; c < classes; ++c) {
                         const double target = c == lab[r] ? 1.0 : 0.0;
                         gl[r * classes + c] += k * (probs[r * classes + c] - target);
                       }
                     }
                   });
  }
  return result;
}

Tensor dwconv2d(const Tensor& v, const Tensor& kernel, bool has_cls) {
  require_rank("dwconv2d", v, 3);
  require_rank("dwconv2d", kernel, 3);
  const std::size_t b = v.dim(0), tokens = v.dim(1), c = v.dim(2);
  const std::size_t k = kernel.dim(1);
  if (kernel.dim(0) != c || kernel.dim(2) != k || k % 2 == 0) mismatch("dwconv2d", v, kernel);
  const std::size_t offset = has_cls ? 1 : 0;
  if (tokens <= offset) throw ShapeError("dwconv2d: no grid tokens in " + shape_str(v.shape()));
  const std::size_t grid = tokens - offset;
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(grid))));
  if (side * side != grid) {
    throw ShapeError("dwconv2d: " + std::to_string(grid) +
                     " grid tokens do not form a square grid");
  }
  const auto radius = static_cast<std::ptrdiff_t>(k / 2);
  const auto s = static_cast<std::ptrdiff_t>(side);

  // Visits every (output token, input token, kernel tap) triple.
  auto for_taps = [=](auto&& fn) {
    for (std::ptrdiff_t y = 0; y < s; ++y)
      for (std::ptrdiff_t x = 0; x < s; ++x)
        for (std::ptrdiff_t dy = -radius; dy <= radius; ++dy) {
          const std::ptrdiff_t yy = y + dy;
          if (yy < 0 || yy >= s) continue;
          for (std::ptrdiff_t dx = -radius; dx <= radius; ++dx) {
            const std::ptrdiff_t xx = x + dx;
            if (xx < 0 || xx >= s) continue;
            const auto out_tok = offset + static_cast<std::size_t>(y * s + x);
            const auto in_tok = offset + static_cast<std::size_t>(yy * s + xx);
            const auto tap = static_cast<std::size_t>((dy + radius) * static_cast<std::ptrdiff_t>(k) + dx + radius);
            fn(out_tok, in_tok, tap);
          }
        }
  };

  auto vv = v.values();
  auto kv = kernel.values();
  std::vector<double> out(v.numel(), 0.0);
  for (std::size_t bi = 0; bi < b; ++bi) {
    const std::size_t base = bi * tokens * c;
    if (has_cls)
      std::copy(vv.data() + base, vv.data() + base + c, out.data() + base);
    for_taps([&](std::size_t ot, std::size_t it, std::size_t tap) {
      for (std::size_t ch = 0; ch < c; ++ch)
        out[base + ot * c + ch] += kv[ch * k * k + tap] * vv[base + it * c + ch];
    });
  }
  Tensor result(v.shape(), std::move(out));
  if (detail::needs_record({&v, &kernel})) {
    detail::record(result, {v, kernel},
                   [v, kernel, b, tokens, c, k, has_cls, for_taps](std::span<const double> g) {
                     auto vv2 = v.values();
                     auto kv2 = kernel.values();
                     std::span<double> gv, gk;
                     if (v.requires_grad()) gv = detail::grad_of(v);
                     if (kernel.requires_grad()) gk = detail::grad_of(kernel);
                     for (std::size_t bi = 0; bi < b; ++bi) {
                       const std::size_t base = bi * tokens * c;
                       if (has_cls && !gv.empty())
                         for (std::size_t ch = 0; ch < c; ++ch) gv[base + ch] += g[base + ch];
                       for_taps([&](std::size_t ot, std::size_t it, std::size_t tap) {
                         for (std::size_t ch = 0; ch < c; ++ch) {
                           const double go = g[base + ot * c + ch];
                           if (!gv.empty()) gv[base + it * c + ch] += kv2[ch * k * k + tap] * go;
                           if (!gk.empty()) gk[ch * k * k + tap] += vv2[base + it * c + ch] * go;
                         }
                       });
                     }
                   });
  }
  return result;
}

Tensor linear_map(const Tensor& x, std::size_t out_dim, LinearFn apply,
                  LinearFn apply_adjoint) {
  require_rank("linear_map", x, 1);
  std::vector<double> out(out_dim, 0.0);
  apply(x.values(), out);
  Tensor result(Shape{out_dim}, std::move(out));
  if (detail::needs_record({&x})) {
    detail::record(result, {x},
                   [x, adjoint = std::move(apply_adjoint)](std::span<const double> g) {
                     std::vector<double> tmp(x.numel(), 0.0);
                     adjoint(g, tmp);
                     auto gx = detail::grad_of(x);
                     for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
                   });
  }
  return result;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss");
  }
  Tape* tape = loss.impl()->tape;
  if (tape == nullptr) throw std::logic_error("backward(): loss is not on a tape");
  tape->backward(loss);
}

}  // namespace kadapt::ops
