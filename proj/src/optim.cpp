// SPDX-License-Identifier: Apache-2.0
#include "kadapt/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace kadapt {

const char* to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adamw"; }

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adamw") return OptimizerKind::adamw;
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"kind", to_string(kind)}, {"momentum", momentum}, {"beta1", beta1}, {"beta2", beta2}, {"eps", eps}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  c.kind = optimizer_kind_from_string(j.value("kind", std::string("sgd")));
  c.momentum = j.value("momentum", c.momentum);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  return c;
}

bool optimizer_step(const OptimizerConfig& cfg, const std::vector<Tensor>& params, double lr, double wd,
                    OptimizerState& state) {
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) {
      if (!std::isfinite(g)) return false;
    }
  }
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.numel(), 0.0);
      if (cfg.kind == OptimizerKind::adamw) state.second.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first.size() != params.size()) throw std::invalid_argument("optimizer state does not match params");
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_values();
    const bool has = params[i].has_grad();
    auto g = has ? params[i].grad() : std::span<const double>{};
    auto& m = state.first[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? g[k] : 0.0;
      if (cfg.kind == OptimizerKind::sgd) {
        m[k] = cfg.momentum * m[k] + gk;
        w[k] -= lr * (m[k] + wd * w[k]);
      } else {
        auto& v = state.second[i];
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
        const double mh = m[k] / c1, vh = v[k] / c2;
        w[k] -= lr * (mh / (std::sqrt(vh) + cfg.eps) + wd * w[k]);
      }
    }
  }
  return true;
}

void Optimizer::zero_grad() const {
  for (const auto& p : params_) p.zero_grad();
}

}  // namespace kadapt
