// SPDX-License-Identifier: Apache-2.0
#include "kadapt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kadapt {

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  NoGradScope no_grad;
  Tensor probe = x.detach();
  auto values = probe.mutable_values();
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double plus = f(probe);
    values[i] = saved - h;
    const double minus = f(probe);
    values[i] = saved;
    out[i] = (plus - minus) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(out));
}

std::vector<double> finite_diff_grad_inplace(const std::function<double()>& f,
                                             const Tensor& param, double h,
                                             std::span<const std::size_t> coords) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  NoGradScope no_grad;
  auto values = param.mutable_values();
  std::vector<double> out;
  out.reserve(coords.size());
  for (auto i : coords) {
    const double saved = values[i];
    values[i] = saved + h;
    const double plus = f();
    values[i] = saved - h;
    const double minus = f();
    values[i] = saved;
    out.push_back((plus - minus) / (2.0 * h));
  }
  return out;
}

double relative_error(std::span<const double> a, std::span<const double> b,
                      double floor) {
  if (a.size() != b.size()) throw std::invalid_argument("relative_error: size mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace kadapt
