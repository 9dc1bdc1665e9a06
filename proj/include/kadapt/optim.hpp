// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "kadapt/tensor.hpp"

namespace kadapt {

enum class OptimizerKind { sgd, adamw };

const char* to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

// Per-parameter moment buffers. SGD uses `first` as the velocity.
struct OptimizerState {
  std::vector<std::vector<double>> first, second;
  std::size_t steps = 0;
};

// One update of `params` from their accumulated gradients.
//   sgd:   v <- mu v + g;  p <- p - lr (v + wd p)
//   adamw: m, v bias-corrected;  p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)
// Parameters without a gradient are treated as g = 0. Returns false without
// touching anything when some gradient entry is non-finite.
bool optimizer_step(const OptimizerConfig& cfg, const std::vector<Tensor>& params, double lr, double wd,
                    OptimizerState& state);

class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::vector<Tensor> params) : cfg_(cfg), params_(std::move(params)) {}

  void zero_grad() const;
  bool step(double lr, double wd) { return optimizer_step(cfg_, params_, lr, wd, state_); }
  const OptimizerState& state() const { return state_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> params_;
  OptimizerState state_;
};

}  // namespace kadapt
