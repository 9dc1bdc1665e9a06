// SPDX-License-Identifier: Apache-2.0
//
// Parameter counting and the performance-efficiency score.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "kadapt/peft.hpp"

namespace kadapt {

enum class CountMethod { adapter, lora, compacter, kadaptation };

const char* to_string(CountMethod method);
CountMethod count_method_from_string(const std::string& name);

// L: layers (for LoRA, adapted matrices); k: adapter input size; d: adapter
// bottleneck; d_model: hidden size; r: rank; n: Kronecker count.
struct CountInputs {
  std::uint64_t L = 12, k = 768, d = 64, d_model = 768, r = 4, n = 4;
};

// Closed-form trainable-parameter counts, evaluated exactly:
//   adapter      4 L k d
//   lora         2 L r d_model
//   compacter    4 L (k/n + d/n) + n^3
//   kadaptation  2 L (d_model/n + r/n) + n^3
// Fractions are kept rational; a non-integer total or a zero input throws
// std::invalid_argument.
std::uint64_t formula_count(CountMethod method, const CountInputs& in);

struct CountBreakdown {
  std::uint64_t head = 0;
  std::uint64_t non_head = 0;
  // Sorted by path.
  std::vector<ParamInfo> per_path;
  std::uint64_t total() const { return head + non_head; }
};

// Exact trainable-parameter count split into classifier head and the rest.
CountBreakdown enumerate_count(const NamedTensors& trainable);
CountBreakdown enumerate_count(const AdaptedModel& adapted);

inline constexpr double kDefaultM0 = 1e8;

struct PEScore {
  double score = 0.0;
  std::uint64_t trainable_params = 0;
  double m0 = kDefaultM0;
  double pe = 0.0;
};

// score * exp(-log10(params / M0 + 1)). Throws std::invalid_argument unless
// score is in [0, 1] and M0 > 0.
PEScore pe_metric(double score, std::uint64_t trainable_params, double m0 = kDefaultM0);

struct Reconciliation {
  CountMethod method;
  CountInputs inputs;
  std::uint64_t formula = 0;
  std::uint64_t enumerated = 0;           // non-head, as configured
  std::uint64_t enumerated_no_bias = 0;   // non-head without bias vectors
  std::int64_t gap = 0;                   // enumerated_no_bias - formula
  double relative_gap = 0.0;              // gap / formula
  std::string note;
  nlohmann::json to_json() const;
};

// Formula inputs that describe an adapted vit model: L, k = d_model,
// bottleneck, rank and n taken from the strategy. For LoRA, L is the number of
// adapted matrices.
CountInputs count_inputs_for(const AdaptedModel& adapted);

// Compares formula_count against enumeration for a strategy with a formula
// row. Throws std::invalid_argument for kinds without one.
Reconciliation reconcile(CountMethod method, const CountInputs& inputs, const AdaptedModel& adapted);
Reconciliation reconcile(const AdaptedModel& adapted);

// Formula row that describes a strategy kind, if any.
bool has_formula(StrategyKind kind);
CountMethod formula_method(StrategyKind kind);

}  // namespace kadapt
