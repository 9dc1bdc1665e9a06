// SPDX-License-Identifier: Apache-2.0
#include "kadapt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <boost/rational.hpp>

namespace kadapt {

namespace {

using Rational = boost::rational<std::int64_t>;

Rational q(std::uint64_t v) { return Rational(static_cast<std::int64_t>(v)); }

}  // namespace

const char* to_string(CountMethod method) {
  switch (method) {
    case CountMethod::adapter: return "adapter";
    case CountMethod::lora: return "lora";
    case CountMethod::compacter: return "compacter";
    case CountMethod::kadaptation: return "kadaptation";
  }
  return "?";
}

CountMethod count_method_from_string(const std::string& name) {
  if (name == "adapter") return CountMethod::adapter;
  if (name == "lora") return CountMethod::lora;
  if (name == "compacter") return CountMethod::compacter;
  if (name == "kadaptation") return CountMethod::kadaptation;
  throw std::invalid_argument("unknown count method '" + name + "'");
}

std::uint64_t formula_count(CountMethod method, const CountInputs& in) {
  auto need = [](std::uint64_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("formula_count: ") + name + " must be positive");
  };
  Rational total;
  switch (method) {
    case CountMethod::adapter:
      need(in.L, "L");
      need(in.k, "k");
      need(in.d, "d");
      total = 4 * q(in.L) * q(in.k) * q(in.d);
      break;
    case CountMethod::lora:
      need(in.L, "L");
      need(in.r, "r");
      need(in.d_model, "d_model");
      total = 2 * q(in.L) * q(in.r) * q(in.d_model);
      break;
    case CountMethod::compacter:
      need(in.L, "L");
      need(in.k, "k");
      need(in.d, "d");
      need(in.n, "n");
      total = 4 * q(in.L) * (q(in.k) / q(in.n) + q(in.d) / q(in.n)) + q(in.n) * q(in.n) * q(in.n);
      break;
    case CountMethod::kadaptation:
      need(in.L, "L");
      need(in.d_model, "d_model");
      need(in.r, "r");
      need(in.n, "n");
      total = 2 * q(in.L) * (q(in.d_model) / q(in.n) + q(in.r) / q(in.n)) + q(in.n) * q(in.n) * q(in.n);
      break;
  }
  if (total.denominator() != 1) {
    throw std::invalid_argument(std::string("formula_count(") + to_string(method) + "): total " +
                                std::to_string(total.numerator()) + "/" + std::to_string(total.denominator()) +
                                " is not an integer; check that n divides the dimensions");
  }
  return static_cast<std::uint64_t>(total.numerator());
}

CountBreakdown enumerate_count(const NamedTensors& trainable) {
  CountBreakdown out;
  for (const auto& [path, t] : trainable) {
    out.per_path.push_back({path, t.shape(), t.numel()});
    if (path == "head.W" || path == "head.b") {
      out.head += t.numel();
    } else {
      out.non_head += t.numel();
    }
  }
  std::sort(out.per_path.begin(), out.per_path.end(),
            [](const ParamInfo& a, const ParamInfo& b) { return a.path < b.path; });
  return out;
}

CountBreakdown enumerate_count(const AdaptedModel& adapted) { return enumerate_count(adapted.trainable()); }

PEScore pe_metric(double score, std::uint64_t trainable_params, double m0) {
  if (!(score >= 0.0 && score <= 1.0)) throw std::invalid_argument("pe_metric: score must lie in [0, 1]");
  if (!(m0 > 0.0)) throw std::invalid_argument("pe_metric: M0 must be positive");
  PEScore s;
  s.score = score;
  s.trainable_params = trainable_params;
  s.m0 = m0;
  s.pe = score * std::exp(-std::log10(static_cast<double>(trainable_params) / m0 + 1.0));
  return s;
}

bool has_formula(StrategyKind kind) {
  return kind == StrategyKind::adapter || kind == StrategyKind::lora || kind == StrategyKind::compacter ||
         kind == StrategyKind::kadaptation;
}

CountMethod formula_method(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::adapter: return CountMethod::adapter;
    case StrategyKind::lora: return CountMethod::lora;
    case StrategyKind::compacter: return CountMethod::compacter;
    case StrategyKind::kadaptation: return CountMethod::kadaptation;
    default: break;
  }
  throw std::invalid_argument(std::string("strategy kind ") + to_string(kind) + " has no parameter-count formula");
}

CountInputs count_inputs_for(const AdaptedModel& adapted) {
  const auto& cfg = adapted.base().config();
  const auto& s = adapted.strategy();
  CountInputs in;
  in.L = cfg.num_layers;
  in.k = cfg.d_model;
  in.d = s.bottleneck;
  in.d_model = cfg.d_model;
  in.r = s.rank;
  in.n = s.n;
  if (s.kind == StrategyKind::lora) in.L = cfg.num_layers * s.lora_targets.size();
  return in;
}

Reconciliation reconcile(CountMethod method, const CountInputs& inputs, const AdaptedModel& adapted) {
  Reconciliation r;
  r.method = method;
  r.inputs = inputs;
  r.formula = formula_count(method, inputs);
  const CountBreakdown counts = enumerate_count(adapted);
  r.enumerated = counts.non_head;
  for (const auto& p : counts.per_path) {
    const std::string leaf = p.path.substr(p.path.rfind('.') + 1);
    const bool bias = leaf == "down_b" || leaf == "up_b" || leaf == "bias";
    if (p.path != "head.W" && p.path != "head.b" && !bias) r.enumerated_no_bias += p.count;
  }
  r.gap = static_cast<std::int64_t>(r.enumerated_no_bias) - static_cast<std::int64_t>(r.formula);
  r.relative_gap = static_cast<double>(r.gap) / static_cast<double>(r.formula);
  switch (method) {
    case CountMethod::adapter:
      r.note = "formula omits adapter bias vectors; enumerated includes them when enabled";
      break;
    case CountMethod::lora:
      r.note = "L counts adapted matrices (layers x targets)";
      break;
    case CountMethod::compacter:
      r.note = "formula counts one rank-one pair per projection; enumeration holds n pairs per projection";
      break;
    case CountMethod::kadaptation:
      r.note = "formula differs from direct enumeration of the factors: n^3 shared slow weights plus "
               "r(k+d) fast weights per adapted k x d matrix";
      break;
  }
  return r;
}

Reconciliation reconcile(const AdaptedModel& adapted) {
  return reconcile(formula_method(adapted.strategy().kind), count_inputs_for(adapted), adapted);
}

nlohmann::json Reconciliation::to_json() const {
  return {{"method", to_string(method)},
          {"inputs",
           {{"L", inputs.L}, {"k", inputs.k}, {"d", inputs.d}, {"d_model", inputs.d_model}, {"r", inputs.r},
            {"n", inputs.n}}},
          {"formula", formula},
          {"enumerated_non_head", enumerated},
          {"enumerated_non_head_no_bias", enumerated_no_bias},
          {"gap", gap},
          {"relative_gap", relative_gap},
          {"note", note}};
}

}  // namespace kadapt
