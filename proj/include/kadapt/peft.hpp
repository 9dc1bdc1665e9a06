// SPDX-License-Identifier: Apache-2.0
//
// Adaptation strategies. An AdaptStrategy is a declarative description; an
// AdaptedModel applies it to a private copy of a base model by choosing which
// registry entries train and injecting new modules or weight deltas through
// the ViT forward hooks.
//
// Injected tensors are named under "delta.":
//   KAdaptation  delta.slow.A<i>, delta.<site>.u<i>, delta.<site>.v<i>
//   LoRA         delta.<site>.A, delta.<site>.B
//   Adapter      delta.block.<l>.adapter_{attn,mlp,inner}.{down,down_b,up,up_b}
//   Compacter    delta.compacter.A<i>, delta.block.<l>.compacter_{attn,mlp}.{down,up}.{u,v}<i>
//   Probe block  delta.probe.<block slot>
//   LePE / RPB   delta.block.<l>.attn.{lepe.kernel,rpb.table,rpb.cls}
// where <site> is a registry path such as block.3.attn.Wq.
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kadapt/random.hpp"
#include "kadapt/tensor.hpp"
#include "kadapt/vit.hpp"

namespace kadapt {

enum class StrategyKind {
  full_finetune,
  linear_probe,
  transformer_probe,
  bitfit,
  layernorm_tune,
  attention_tune,
  adapter,
  adapter_drop,
  lora,
  compacter,
  kadaptation,
  lepe_tune,
  rpb_tune,
};

enum class AdapterPlacement { after_mlp_and_attn, inside_attention };
enum class KronTargets { attention_qv, mlp };

struct AdaptStrategy {
  StrategyKind kind = StrategyKind::linear_probe;
  // Adapter, AdapterDrop, Compacter.
  std::size_t bottleneck = 64;
  AdapterPlacement placement = AdapterPlacement::after_mlp_and_attn;
  bool adapter_bias = true;
  // LoRA and KAdaptation.
  std::size_t rank = 4;
  std::vector<std::string> lora_targets{"Wq", "Wv"};
  bool fix_a = false;
  // Kronecker count for KAdaptation and Compacter.
  std::size_t n = 32;
  KronTargets kron_targets = KronTargets::attention_qv;
  // Factor each slow A_i as a_i b_i with inner size slow_rank.
  bool low_rank_slow = false;
  std::size_t slow_rank = 1;
  // Trainable bias delta next to each adapted weight.
  bool delta_bias = false;
  std::size_t lepe_kernel = 3;

  static AdaptStrategy full_finetune();
  static AdaptStrategy linear_probe();
  static AdaptStrategy transformer_probe();
  static AdaptStrategy bitfit();
  static AdaptStrategy layernorm_tune();
  static AdaptStrategy attention_tune();
  static AdaptStrategy adapter(std::size_t bottleneck = 64,
                               AdapterPlacement placement = AdapterPlacement::after_mlp_and_attn);
  static AdaptStrategy adapter_drop(std::size_t bottleneck = 64);
  static AdaptStrategy lora(std::size_t rank = 4, bool fix_a = false);
  static AdaptStrategy compacter(std::size_t n = 4, std::size_t bottleneck = 64);
  static AdaptStrategy kadaptation(std::size_t n = 32, std::size_t rank = 1,
                                   KronTargets targets = KronTargets::attention_qv);
  static AdaptStrategy lepe_tune(std::size_t kernel = 3);
  static AdaptStrategy rpb_tune();

  // Display name, e.g. "KAdaptation" or "LoRA-Fix".
  std::string name() const;
  // Weight-delta kinds whose deltas fold into the base weights.
  bool mergeable() const { return kind == StrategyKind::lora || kind == StrategyKind::kadaptation; }

  // Throws std::invalid_argument when hyperparameters are non-positive or
  // incompatible with the model (divisibility, rank bounds).
  void validate(const ViTConfig& cfg) const;

  nlohmann::json to_json() const;
  static AdaptStrategy from_json(const nlohmann::json& j);
  // "kadaptation:n=4,r=1,targets=attention_qv", "lora-fix:r=2", "bitfit", ...
  static AdaptStrategy parse(const std::string& text);
};

const char* to_string(StrategyKind kind);

// Sum-of-Kronecker-products weight delta: for each adapted k x d site,
// dW = scale * sum_i kron(A_i, u_i v_i) with u_i (k/n) x r and v_i r x (d/n).
// The slow factors A_i (n x n) are shared by every site.
class KronDelta {
 public:
  struct Site {
    std::size_t k = 0, d = 0;
    std::vector<Tensor> u, v;
    Tensor bias;  // [d], only with delta_bias
  };

  // Slow factors are drawn from rng; with low_rank_slow each A_i = a_i b_i.
  KronDelta(std::size_t n, std::size_t r, Rng& rng, bool low_rank_slow = false,
            std::size_t slow_rank = 1, bool delta_bias = false);

  // Registers a site with fresh fast factors; v starts at zero so dW = 0.
  void add_site(const std::string& site, std::size_t k, std::size_t d, Rng& rng);

  bool has_site(const std::string& site) const { return sites_.count(site) != 0; }
  const Site& site(const std::string& site) const;
  std::vector<std::string> site_names() const;

  // Throws std::out_of_range for unregistered sites.
  Tensor materialize(const std::string& site) const;
  // A_i as used in the sum (a_i b_i in low-rank mode).
  Tensor slow(std::size_t i) const;

  std::size_t n() const { return n_; }
  std::size_t rank() const { return r_; }
  double scale = 1.0;

  // Slow factors first, then per site in registration order.
  NamedTensors parameters() const;

 private:
  std::size_t n_, r_;
  bool low_rank_slow_, delta_bias_;
  std::vector<Tensor> slow_;     // A_i, or a_i, b_i interleaved in low-rank mode
  std::map<std::string, Site> sites_;
  std::vector<std::string> order_;
};

// Residual bottleneck: x + up(gelu(down x + down_b)) + up_b, weights stored
// [in, out]; biases are undefined when disabled.
struct AdapterBlock {
  Tensor down, down_b, up, up_b;
};

AdapterBlock make_adapter(std::size_t k, std::size_t bottleneck, bool bias, Rng& rng);
Tensor adapter_forward(const AdapterBlock& block, const Tensor& x);

// Parameterized hypercomplex weight sum_i kron(A_i, u_i v_i).
Tensor phm_weight(std::span<const Tensor> slow, std::span<const Tensor> u,
                  std::span<const Tensor> v);

// Compacter layer: adapter topology with PHM down/up projections built from
// shared slow factors and per-layer rank-one fast factors.
struct CompacterBlock {
  std::vector<Tensor> down_u, down_v, up_u, up_v;
  Tensor down_b, up_b;
};

CompacterBlock make_compacter(std::size_t k, std::size_t bottleneck, std::size_t n, bool bias,
                              Rng& rng);
Tensor compacter_down(const CompacterBlock& block, std::span<const Tensor> slow);
Tensor compacter_up(const CompacterBlock& block, std::span<const Tensor> slow);
Tensor compacter_forward(const CompacterBlock& block, std::span<const Tensor> slow, const Tensor& x);

class AdaptedModel : public ForwardHooks {
 public:
  // Deep-copies `base`; the caller's model is never modified.
  AdaptedModel(const ViTModel& base, const AdaptStrategy& strategy, std::uint64_t seed);
  ~AdaptedModel() override;
  AdaptedModel(AdaptedModel&&) noexcept;
  AdaptedModel& operator=(AdaptedModel&&) noexcept;

  const AdaptStrategy& strategy() const { return strategy_; }
  std::uint64_t seed() const { return seed_; }
  const ViTModel& base() const { return base_; }
  const AttentionVariant& variant() const { return variant_; }

  // Tensors the optimizer updates: selected base entries (registry order),
  // then injected tensors. Always includes head.W and head.b.
  const NamedTensors& trainable() const { return trainable_; }
  // Injected tensors only (names start with "delta.").
  const NamedTensors& injected() const { return injected_; }

  Tensor forward(const Tensor& images) const;

  // Standalone model with every delta folded into its base weight. Throws
  // std::logic_error for strategies that add layers or attention terms.
  ViTModel merge() const;

  // Fresh copy sharing no storage, same trainable structure.
  AdaptedModel clone() const;

  const KronDelta* kron_delta() const { return kron_.get(); }

  Checkpoint to_checkpoint() const;
  static AdaptedModel from_checkpoint(const Checkpoint& ckpt);

  // ForwardHooks
  Tensor param(const std::string& path, const Tensor& base) const override;
  Tensor inside_attention(std::size_t layer, const Tensor& context) const override;
  Tensor after_attention(std::size_t layer, const Tensor& out) const override;
  Tensor after_mlp(std::size_t layer, const Tensor& out) const override;
  Tensor before_norm(const Tensor& x) const override;

 private:
  struct LoraSite {
    Tensor a, b;  // A [r, in], B [out, r]
  };

  void inject(Rng& rng);
  void select_base();
  void add_injected(const std::string& path, const Tensor& t, bool trainable = true);
  // dW in [in, out] layout plus optional bias delta for a weight path.
  std::optional<Tensor> weight_delta(const std::string& path) const;
  std::optional<Tensor> bias_delta(const std::string& path) const;

  AdaptStrategy strategy_;
  std::uint64_t seed_;
  ViTModel base_;
  AttentionVariant variant_;
  NamedTensors trainable_;
  NamedTensors injected_;

  std::unique_ptr<KronDelta> kron_;
  std::map<std::string, LoraSite> lora_;
  std::map<std::string, std::string> bias_to_site_;
  // Keyed by layer; "attn", "mlp", "inner" positions.
  std::map<std::size_t, AdapterBlock> adapter_attn_, adapter_mlp_, adapter_inner_;
  std::vector<Tensor> compacter_slow_;
  std::map<std::size_t, CompacterBlock> compacter_attn_, compacter_mlp_;
  NamedTensors probe_;
};

// Paths of all site weights a strategy adapts on this config (KAdaptation and
// LoRA), e.g. block.0.attn.Wq.
std::vector<std::string> delta_sites(const AdaptStrategy& strategy, const ViTConfig& cfg);

}  // namespace kadapt
