// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient estimates, used as the independent oracle for
// every backward rule.
#pragma once

#include <functional>
#include <span>
#include <vector>

#include "kadapt/tensor.hpp"

namespace kadapt {

// (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of x. f receives a
// perturbed copy; x itself is not modified.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h);

// Same estimate for selected coordinates of a tensor that f reads implicitly
// (a model parameter). The tensor is perturbed in place and restored.
std::vector<double> finite_diff_grad_inplace(const std::function<double()>& f,
                                             const Tensor& param, double h,
                                             std::span<const std::size_t> coords);

// ||a - b||_2 / max(||a||_2, ||b||_2, floor).
double relative_error(std::span<const double> a, std::span<const double> b,
                      double floor = 1e-12);

}  // namespace kadapt
