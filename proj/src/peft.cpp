// SPDX-License-Identifier: Apache-2.0
#include "kadapt/peft.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "kadapt/ops.hpp"

namespace kadapt {

// ---------------------------------------------------------------------------
// AdaptStrategy

namespace {

AdaptStrategy with_kind(StrategyKind kind) {
  AdaptStrategy s;
  s.kind = kind;
  return s;
}

struct KindName {
  StrategyKind kind;
  const char* id;
};

constexpr KindName kKindNames[] = {
    {StrategyKind::full_finetune, "full_finetune"},
    {StrategyKind::linear_probe, "linear_probe"},
    {StrategyKind::transformer_probe, "transformer_probe"},
    {StrategyKind::bitfit, "bitfit"},
    {StrategyKind::layernorm_tune, "layernorm_tune"},
    {StrategyKind::attention_tune, "attention_tune"},
    {StrategyKind::adapter, "adapter"},
    {StrategyKind::adapter_drop, "adapter_drop"},
    {StrategyKind::lora, "lora"},
    {StrategyKind::compacter, "compacter"},
    {StrategyKind::kadaptation, "kadaptation"},
    {StrategyKind::lepe_tune, "lepe_tune"},
    {StrategyKind::rpb_tune, "rpb_tune"},
};

StrategyKind kind_from_string(const std::string& id) {
  for (const auto& entry : kKindNames)
    if (id == entry.id) return entry.kind;
  throw std::invalid_argument("unknown strategy kind '" + id + "'");
}

const char* placement_id(AdapterPlacement p) {
  return p == AdapterPlacement::after_mlp_and_attn ? "after_mlp_and_attn" : "inside_attention";
}

AdapterPlacement placement_from_string(const std::string& id) {
  if (id == "after_mlp_and_attn") return AdapterPlacement::after_mlp_and_attn;
  if (id == "inside_attention") return AdapterPlacement::inside_attention;
  throw std::invalid_argument("unknown adapter placement '" + id + "'");
}

const char* targets_id(KronTargets t) { return t == KronTargets::attention_qv ? "attention_qv" : "mlp"; }

KronTargets targets_from_string(const std::string& id) {
  if (id == "attention_qv") return KronTargets::attention_qv;
  if (id == "mlp") return KronTargets::mlp;
  throw std::invalid_argument("unknown KAdaptation targets '" + id + "'");
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }
bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string layer_prefix(std::size_t l) { return "block." + std::to_string(l); }

// block.0.attn.Wq -> block.0.attn.bq, block.0.mlp.W1 -> block.0.mlp.b1
std::string bias_path_for(const std::string& weight_path) {
  auto dot = weight_path.rfind('.');
  std::string out = weight_path;
  out[dot + 1] = 'b';
  return out;
}

void check_divides(std::size_t n, std::size_t dim, const std::string& what) {
  if (dim % n != 0) {
    throw std::invalid_argument("Kronecker count n=" + std::to_string(n) + " does not divide " + what + " (" +
                                std::to_string(dim) + ")");
  }
}

}  // namespace

const char* to_string(StrategyKind kind) {
  for (const auto& entry : kKindNames)
    if (entry.kind == kind) return entry.id;
  return "?";
}

AdaptStrategy AdaptStrategy::full_finetune() { return with_kind(StrategyKind::full_finetune); }
AdaptStrategy AdaptStrategy::linear_probe() { return with_kind(StrategyKind::linear_probe); }
AdaptStrategy AdaptStrategy::transformer_probe() { return with_kind(StrategyKind::transformer_probe); }
AdaptStrategy AdaptStrategy::bitfit() { return with_kind(StrategyKind::bitfit); }
AdaptStrategy AdaptStrategy::layernorm_tune() { return with_kind(StrategyKind::layernorm_tune); }
AdaptStrategy AdaptStrategy::attention_tune() { return with_kind(StrategyKind::attention_tune); }

AdaptStrategy AdaptStrategy::adapter(std::size_t bottleneck, AdapterPlacement placement) {
  auto s = with_kind(StrategyKind::adapter);
  s.bottleneck = bottleneck;
  s.placement = placement;
  return s;
}

AdaptStrategy AdaptStrategy::adapter_drop(std::size_t bottleneck) {
  auto s = with_kind(StrategyKind::adapter_drop);
  s.bottleneck = bottleneck;
  return s;
}

AdaptStrategy AdaptStrategy::lora(std::size_t rank, bool fix_a) {
  auto s = with_kind(StrategyKind::lora);
  s.rank = rank;
  s.fix_a = fix_a;
  return s;
}

AdaptStrategy AdaptStrategy::compacter(std::size_t n, std::size_t bottleneck) {
  auto s = with_kind(StrategyKind::compacter);
  s.n = n;
  s.bottleneck = bottleneck;
  return s;
}

AdaptStrategy AdaptStrategy::kadaptation(std::size_t n, std::size_t rank, KronTargets targets) {
  auto s = with_kind(StrategyKind::kadaptation);
  s.n = n;
  s.rank = rank;
  s.kron_targets = targets;
  return s;
}

AdaptStrategy AdaptStrategy::lepe_tune(std::size_t kernel) {
  auto s = with_kind(StrategyKind::lepe_tune);
  s.lepe_kernel = kernel;
  return s;
}

AdaptStrategy AdaptStrategy::rpb_tune() { return with_kind(StrategyKind::rpb_tune); }

std::string AdaptStrategy::name() const {
  switch (kind) {
    case StrategyKind::full_finetune: return "FullFinetune";
    case StrategyKind::linear_probe: return "LinearProbe";
    case StrategyKind::transformer_probe: return "TransformerProbe";
    case StrategyKind::bitfit: return "BitFit";
    case StrategyKind::layernorm_tune: return "LayerNormTune";
    case StrategyKind::attention_tune: return "AttentionTune";
    case StrategyKind::adapter:
      return placement == AdapterPlacement::inside_attention ? "Adapter-InAttention" : "Adapter";
    case StrategyKind::adapter_drop: return "AdapterDrop";
    case StrategyKind::lora: return fix_a ? "LoRA-Fix" : "LoRA";
    case StrategyKind::compacter: return "Compacter";
    case StrategyKind::kadaptation: return kron_targets == KronTargets::mlp ? "KAdaptation-MLP" : "KAdaptation";
    case StrategyKind::lepe_tune: return "LePETune";
    case StrategyKind::rpb_tune: return "RPBTune";
  }
  return "?";
}

std::vector<std::string> delta_sites(const AdaptStrategy& s, const ViTConfig& cfg) {
  std::vector<std::string> sites;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = layer_prefix(l);
    if (s.kind == StrategyKind::kadaptation) {
      if (s.kron_targets == KronTargets::attention_qv) {
        sites.push_back(p + ".attn.Wq");
        sites.push_back(p + ".attn.Wv");
      } else {
        sites.push_back(p + ".mlp.W1");
        sites.push_back(p + ".mlp.W2");
      }
    } else if (s.kind == StrategyKind::lora) {
      for (const auto& t : s.lora_targets) sites.push_back(p + ".attn." + t);
    }
  }
  return sites;
}

void AdaptStrategy::validate(const ViTConfig& cfg) const {
  cfg.validate();
  auto positive = [&](std::size_t v, const char* what) {
    if (v == 0) throw std::invalid_argument(name() + ": " + what + " must be positive");
  };
  switch (kind) {
    case StrategyKind::adapter:
    case StrategyKind::adapter_drop:
      positive(bottleneck, "bottleneck");
      break;
    case StrategyKind::compacter:
      positive(bottleneck, "bottleneck");
      positive(n, "n");
      check_divides(n, cfg.d_model, "d_model");
      check_divides(n, bottleneck, "the bottleneck");
      break;
    case StrategyKind::lora: {
      positive(rank, "rank");
      if (lora_targets.empty()) throw std::invalid_argument("LoRA: no target matrices");
      for (const auto& t : lora_targets) {
        if (t != "Wq" && t != "Wk" && t != "Wv" && t != "Wo") {
          throw std::invalid_argument("LoRA: unknown target '" + t + "'");
        }
      }
      if (rank > cfg.d_model) {
        throw std::invalid_argument("LoRA: rank " + std::to_string(rank) + " exceeds min(d, k) = " +
                                    std::to_string(cfg.d_model));
      }
      break;
    }
    case StrategyKind::kadaptation: {
      positive(rank, "rank");
      positive(n, "n");
      if (low_rank_slow) positive(slow_rank, "slow_rank");
      const std::size_t k = cfg.d_model;
      const std::size_t d = kron_targets == KronTargets::mlp ? cfg.mlp_hidden() : cfg.d_model;
      check_divides(n, k, "d_model");
      check_divides(n, d, kron_targets == KronTargets::mlp ? "the MLP width" : "d_model");
      if (rank > std::min(k, d) / n) {
        throw std::invalid_argument("KAdaptation: rank " + std::to_string(rank) + " exceeds the fast factor size " +
                                    std::to_string(std::min(k, d) / n));
      }
      break;
    }
    case StrategyKind::lepe_tune:
      if (lepe_kernel % 2 == 0) throw std::invalid_argument("LePETune: kernel size must be odd");
      break;
    default:
      break;
  }
}

nlohmann::json AdaptStrategy::to_json() const {
  return {{"kind", to_string(kind)},
          {"name", name()},
          {"bottleneck", bottleneck},
          {"placement", placement_id(placement)},
          {"adapter_bias", adapter_bias},
          {"rank", rank},
          {"lora_targets", lora_targets},
          {"fix_a", fix_a},
          {"n", n},
          {"kron_targets", targets_id(kron_targets)},
          {"low_rank_slow", low_rank_slow},
          {"slow_rank", slow_rank},
          {"delta_bias", delta_bias},
          {"lepe_kernel", lepe_kernel}};
}

AdaptStrategy AdaptStrategy::from_json(const nlohmann::json& j) {
  AdaptStrategy s;
  s.kind = kind_from_string(j.at("kind").get<std::string>());
  s.bottleneck = j.value("bottleneck", s.bottleneck);
  s.placement = placement_from_string(j.value("placement", std::string(placement_id(s.placement))));
  s.adapter_bias = j.value("adapter_bias", s.adapter_bias);
  s.rank = j.value("rank", s.rank);
  s.lora_targets = j.value("lora_targets", s.lora_targets);
  s.fix_a = j.value("fix_a", s.fix_a);
  s.n = j.value("n", s.n);
  s.kron_targets = targets_from_string(j.value("kron_targets", std::string(targets_id(s.kron_targets))));
  s.low_rank_slow = j.value("low_rank_slow", s.low_rank_slow);
  s.slow_rank = j.value("slow_rank", s.slow_rank);
  s.delta_bias = j.value("delta_bias", s.delta_bias);
  s.lepe_kernel = j.value("lepe_kernel", s.lepe_kernel);
  return s;
}

AdaptStrategy AdaptStrategy::parse(const std::string& text) {
  const auto colon = text.find(':');
  std::string head = text.substr(0, colon);
  for (auto& c : head) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (auto& c : head)
    if (c == '-') c = '_';

  AdaptStrategy s;
  if (head == "lora_fix") {
    s = lora(4, true);
  } else if (head == "fullfinetune" || head == "full") {
    s = full_finetune();
  } else if (head == "linearprobe" || head == "linear") {
    s = linear_probe();
  } else {
    s.kind = kind_from_string(head);
  }
  if (colon == std::string::npos) return s;

  std::stringstream rest(text.substr(colon + 1));
  std::string item;
  while (std::getline(rest, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("strategy option '" + item + "' is not key=value");
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    auto number = [&] {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(value, &used);
      if (used != value.size()) throw std::invalid_argument("strategy option '" + item + "' is not an integer");
      return static_cast<std::size_t>(v);
    };
    auto flag = [&] {
      if (value == "1" || value == "true") return true;
      if (value == "0" || value == "false") return false;
      throw std::invalid_argument("strategy option '" + item + "' is not a boolean");
    };
    if (key == "n") s.n = number();
    else if (key == "r" || key == "rank") s.rank = number();
    else if (key == "bottleneck" || key == "d") s.bottleneck = number();
    else if (key == "targets") {
      if (s.kind == StrategyKind::lora) {
        s.lora_targets.clear();
        std::stringstream ts(value);
        std::string t;
        while (std::getline(ts, t, '+')) s.lora_targets.push_back(t);
      } else {
        s.kron_targets = targets_from_string(value);
      }
    } else if (key == "placement") s.placement = placement_from_string(value);
    else if (key == "bias") {
      s.adapter_bias = flag();
      s.delta_bias = s.kind == StrategyKind::kadaptation && s.adapter_bias;
    } else if (key == "fix_a") s.fix_a = flag();
    else if (key == "low_rank_slow") s.low_rank_slow = flag();
    else if (key == "slow_rank") s.slow_rank = number();
    else if (key == "kernel") s.lepe_kernel = number();
    else throw std::invalid_argument("unknown strategy option '" + key + "'");
  }
  return s;
}

// ---------------------------------------------------------------------------
// KronDelta

KronDelta::KronDelta(std::size_t n, std::size_t r, Rng& rng, bool low_rank_slow, std::size_t slow_rank,
                     bool delta_bias)
    : n_(n), r_(r), low_rank_slow_(low_rank_slow), delta_bias_(delta_bias) {
  if (n == 0 || r == 0) throw std::invalid_argument("KronDelta: n and r must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    if (low_rank_slow_) {
      slow_.push_back(rng.uniform_tensor({n, slow_rank}, bound));
      slow_.push_back(rng.uniform_tensor({slow_rank, n}, 1.0 / std::sqrt(static_cast<double>(slow_rank))));
    } else {
      slow_.push_back(rng.uniform_tensor({n, n}, bound));
    }
  }
}

void KronDelta::add_site(const std::string& name, std::size_t k, std::size_t d, Rng& rng) {
  check_divides(n_, k, name + " rows");
  check_divides(n_, d, name + " columns");
  if (sites_.count(name)) throw std::invalid_argument("KronDelta: site '" + name + "' registered twice");
  Site s;
  s.k = k;
  s.d = d;
  const double bound = 1.0 / std::sqrt(static_cast<double>(k / n_));
  for (std::size_t i = 0; i < n_; ++i) {
    s.u.push_back(rng.uniform_tensor({k / n_, r_}, bound));
    s.v.emplace_back(Shape{r_, d / n_});
  }
  if (delta_bias_) s.bias = Tensor(Shape{d});
  sites_.emplace(name, std::move(s));
  order_.push_back(name);
}

const KronDelta::Site& KronDelta::site(const std::string& name) const {
  auto it = sites_.find(name);
  if (it == sites_.end()) throw std::out_of_range("KronDelta: site '" + name + "' is not registered");
  return it->second;
}

std::vector<std::string> KronDelta::site_names() const { return order_; }

Tensor KronDelta::slow(std::size_t i) const {
  if (low_rank_slow_) return ops::matmul(slow_.at(2 * i), slow_.at(2 * i + 1));
  return slow_.at(i);
}

Tensor KronDelta::materialize(const std::string& name) const {
  const Site& s = site(name);
  Tensor total;
  for (std::size_t i = 0; i < n_; ++i) {
    Tensor term = ops::kron(slow(i), ops::matmul(s.u[i], s.v[i]));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return scale == 1.0 ? total : ops::scale(total, scale);
}

NamedTensors KronDelta::parameters() const {
  NamedTensors out;
  for (std::size_t i = 0; i < n_; ++i) {
    const std::string base = "delta.slow.A" + std::to_string(i);
    if (low_rank_slow_) {
      out.emplace_back(base + ".a", slow_[2 * i]);
      out.emplace_back(base + ".b", slow_[2 * i + 1]);
    } else {
      out.emplace_back(base, slow_[i]);
    }
  }
  for (const auto& name : order_) {
    const Site& s = sites_.at(name);
    for (std::size_t i = 0; i < n_; ++i) {
      out.emplace_back("delta." + name + ".u" + std::to_string(i), s.u[i]);
      out.emplace_back("delta." + name + ".v" + std::to_string(i), s.v[i]);
    }
    if (s.bias.defined()) out.emplace_back("delta." + name + ".bias", s.bias);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adapter and Compacter blocks

AdapterBlock make_adapter(std::size_t k, std::size_t bottleneck, bool bias, Rng& rng) {
  AdapterBlock block;
  block.down = rng.uniform_tensor({k, bottleneck}, 1.0 / std::sqrt(static_cast<double>(k)));
  block.up = Tensor(Shape{bottleneck, k});
  if (bias) {
    block.down_b = Tensor(Shape{bottleneck});
    block.up_b = Tensor(Shape{k});
  }
  return block;
}

namespace {

// [..., k] -> [rows, k]
Tensor as_rows(const Tensor& x) {
  const std::size_t k = x.shape().back();
  return ops::reshape(x, {x.numel() / k, k});
}

Tensor bottleneck_forward(const Tensor& x, const Tensor& down, const Tensor& down_b, const Tensor& up,
                          const Tensor& up_b) {
  const std::size_t k = x.shape().back();
  if (down.rank() != 2 || down.dim(0) != k || up.rank() != 2 || up.dim(1) != k || up.dim(0) != down.dim(1)) {
    throw ShapeError("adapter: input " + shape_str(x.shape()) + " does not fit down " + shape_str(down.shape()) +
                     " / up " + shape_str(up.shape()));
  }
  Tensor h = ops::matmul(as_rows(x), down);
  if (down_b.defined()) h = ops::add_broadcast(h, down_b);
  Tensor out = ops::matmul(ops::gelu(h), up);
  if (up_b.defined()) out = ops::add_broadcast(out, up_b);
  return ops::add(x, ops::reshape(out, x.shape()));
}

}  // namespace

Tensor adapter_forward(const AdapterBlock& block, const Tensor& x) {
  return bottleneck_forward(x, block.down, block.down_b, block.up, block.up_b);
}

Tensor phm_weight(std::span<const Tensor> slow, std::span<const Tensor> u, std::span<const Tensor> v) {
  if (slow.size() != u.size() || u.size() != v.size() || slow.empty()) {
    throw std::invalid_argument("phm_weight: factor counts differ");
  }
  Tensor total;
  for (std::size_t i = 0; i < slow.size(); ++i) {
    Tensor term = ops::kron(slow[i], ops::matmul(u[i], v[i]));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

CompacterBlock make_compacter(std::size_t k, std::size_t bottleneck, std::size_t n, bool bias, Rng& rng) {
  check_divides(n, k, "the adapter input size");
  check_divides(n, bottleneck, "the bottleneck");
  CompacterBlock block;
  for (std::size_t i = 0; i < n; ++i) {
    block.down_u.push_back(rng.uniform_tensor({k / n, 1}, 1.0 / std::sqrt(static_cast<double>(k / n))));
    block.down_v.push_back(rng.uniform_tensor({1, bottleneck / n}, 1.0));
    block.up_u.push_back(rng.uniform_tensor({bottleneck / n, 1}, 1.0 / std::sqrt(static_cast<double>(bottleneck / n))));
    block.up_v.emplace_back(Shape{1, k / n});
  }
  if (bias) {
    block.down_b = Tensor(Shape{bottleneck});
    block.up_b = Tensor(Shape{k});
  }
  return block;
}

Tensor compacter_down(const CompacterBlock& block, std::span<const Tensor> slow) {
  return phm_weight(slow, block.down_u, block.down_v);
}

Tensor compacter_up(const CompacterBlock& block, std::span<const Tensor> slow) {
  return phm_weight(slow, block.up_u, block.up_v);
}

Tensor compacter_forward(const CompacterBlock& block, std::span<const Tensor> slow, const Tensor& x) {
  return bottleneck_forward(x, compacter_down(block, slow), block.down_b, compacter_up(block, slow), block.up_b);
}

// ---------------------------------------------------------------------------
// AdaptedModel

AdaptedModel::AdaptedModel(const ViTModel& base, const AdaptStrategy& strategy, std::uint64_t seed)
    : strategy_(strategy), seed_(seed), base_(base.clone()) {
  strategy_.validate(base_.config());
  for (const auto& entry : base_.parameters()) Tensor(entry.second).set_requires_grad(false);
  select_base();
  Rng rng(seed, 0x5eedULL);
  inject(rng);
}

AdaptedModel::~AdaptedModel() = default;
AdaptedModel::AdaptedModel(AdaptedModel&&) noexcept = default;
AdaptedModel& AdaptedModel::operator=(AdaptedModel&&) noexcept = default;

void AdaptedModel::select_base() {
  auto selected = [&](const std::string& path) {
    if (path == "head.W" || path == "head.b") return true;
    const std::string leaf = path.substr(path.rfind('.') + 1);
    switch (strategy_.kind) {
      case StrategyKind::full_finetune:
        return true;
      case StrategyKind::bitfit:
        // Bias vectors (b, bq, b1, ...) and LayerNorm shifts (beta).
        return leaf[0] == 'b';
      case StrategyKind::layernorm_tune:
        return leaf == "gamma" || leaf == "beta";
      case StrategyKind::attention_tune:
        return path.find(".attn.") != std::string::npos;
      default:
        return false;
    }
  };
  for (const auto& [path, t] : base_.parameters()) {
    if (!selected(path)) continue;
    Tensor(t).set_requires_grad(true);
    trainable_.emplace_back(path, t);
  }
}

void AdaptedModel::add_injected(const std::string& path, const Tensor& t, bool trainable) {
  injected_.emplace_back(path, t);
  if (trainable) {
    Tensor(t).set_requires_grad(true);
    trainable_.emplace_back(path, t);
  }
}

void AdaptedModel::inject(Rng& rng) {
  const auto& cfg = base_.config();
  const std::size_t d = cfg.d_model;
  auto add_adapter = [&](std::map<std::size_t, AdapterBlock>& slot, std::size_t l, const std::string& where) {
    AdapterBlock block = make_adapter(d, strategy_.bottleneck, strategy_.adapter_bias, rng);
    const std::string p = "delta." + layer_prefix(l) + ".adapter_" + where + ".";
    add_injected(p + "down", block.down);
    if (block.down_b.defined()) add_injected(p + "down_b", block.down_b);
    add_injected(p + "up", block.up);
    if (block.up_b.defined()) add_injected(p + "up_b", block.up_b);
    slot.emplace(l, block);
  };

  switch (strategy_.kind) {
    case StrategyKind::transformer_probe: {
      probe_ = make_block_params(cfg, "delta.probe", rng);
      for (auto& [path, t] : probe_) {
        if (ends_with(path, "attn.Wo") || ends_with(path, "mlp.W2")) {
          for (auto& v : t.mutable_values()) v = 0.0;
        }
        add_injected(path, t);
      }
      break;
    }
    case StrategyKind::adapter:
      for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        if (strategy_.placement == AdapterPlacement::inside_attention) {
          add_adapter(adapter_inner_, l, "inner");
        } else {
          add_adapter(adapter_attn_, l, "attn");
          add_adapter(adapter_mlp_, l, "mlp");
        }
      }
      break;
    case StrategyKind::adapter_drop: {
      const std::size_t l = cfg.num_layers - 1;
      add_adapter(adapter_attn_, l, "attn");
      add_adapter(adapter_mlp_, l, "mlp");
      break;
    }
    case StrategyKind::lora:
      for (const auto& site : delta_sites(strategy_, cfg)) {
        LoraSite s;
        s.a = rng.uniform_tensor({strategy_.rank, d}, 1.0 / std::sqrt(static_cast<double>(d)));
        s.b = Tensor(Shape{d, strategy_.rank});
        add_injected("delta." + site + ".A", s.a, !strategy_.fix_a);
        add_injected("delta." + site + ".B", s.b);
        lora_.emplace(site, s);
      }
      break;
    case StrategyKind::compacter: {
      const std::size_t n = strategy_.n;
      for (std::size_t i = 0; i < n; ++i) {
        compacter_slow_.push_back(rng.uniform_tensor({n, n}, 1.0 / std::sqrt(static_cast<double>(n))));
        add_injected("delta.compacter.A" + std::to_string(i), compacter_slow_.back());
      }
      for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        for (const char* where : {"attn", "mlp"}) {
          CompacterBlock block = make_compacter(d, strategy_.bottleneck, n, strategy_.adapter_bias, rng);
          const std::string p = "delta." + layer_prefix(l) + ".compacter_" + where + ".";
          for (std::size_t i = 0; i < n; ++i) {
            add_injected(p + "down.u" + std::to_string(i), block.down_u[i]);
            add_injected(p + "down.v" + std::to_string(i), block.down_v[i]);
          }
          for (std::size_t i = 0; i < n; ++i) {
            add_injected(p + "up.u" + std::to_string(i), block.up_u[i]);
            add_injected(p + "up.v" + std::to_string(i), block.up_v[i]);
          }
          if (block.down_b.defined()) add_injected(p + "down_b", block.down_b);
          if (block.up_b.defined()) add_injected(p + "up_b", block.up_b);
          (std::string(where) == "attn" ? compacter_attn_ : compacter_mlp_).emplace(l, std::move(block));
        }
      }
      break;
    }
    case StrategyKind::kadaptation: {
      kron_ = std::make_unique<KronDelta>(strategy_.n, strategy_.rank, rng, strategy_.low_rank_slow,
                                          strategy_.slow_rank, strategy_.delta_bias);
      for (const auto& site : delta_sites(strategy_, cfg)) {
        const Tensor& w = base_.at(site);
        kron_->add_site(site, w.dim(0), w.dim(1), rng);
        if (strategy_.delta_bias) bias_to_site_.emplace(bias_path_for(site), site);
      }
      for (const auto& [path, t] : kron_->parameters()) add_injected(path, t);
      break;
    }
    case StrategyKind::lepe_tune:
      variant_ = AttentionVariant::lepe(cfg, strategy_.lepe_kernel);
      for (const auto& [path, t] : variant_.parameters()) add_injected("delta." + path, t);
      break;
    case StrategyKind::rpb_tune:
      variant_ = AttentionVariant::rpb(cfg);
      for (const auto& [path, t] : variant_.parameters()) add_injected("delta." + path, t);
      break;
    default:
      break;
  }
}

std::optional<Tensor> AdaptedModel::weight_delta(const std::string& path) const {
  if (kron_ && kron_->has_site(path)) return kron_->materialize(path);
  auto it = lora_.find(path);
  if (it != lora_.end()) return ops::transpose(ops::matmul(it->second.b, it->second.a));
  return std::nullopt;
}

std::optional<Tensor> AdaptedModel::bias_delta(const std::string& path) const {
  auto it = bias_to_site_.find(path);
  if (it == bias_to_site_.end()) return std::nullopt;
  return kron_->site(it->second).bias;
}

Tensor AdaptedModel::param(const std::string& path, const Tensor& base) const {
  if (auto delta = weight_delta(path)) return ops::add(base, *delta);
  if (auto delta = bias_delta(path)) return ops::add(base, *delta);
  return base;
}

Tensor AdaptedModel::inside_attention(std::size_t layer, const Tensor& context) const {
  auto it = adapter_inner_.find(layer);
  return it == adapter_inner_.end() ? context : adapter_forward(it->second, context);
}

Tensor AdaptedModel::after_attention(std::size_t layer, const Tensor& out) const {
  if (auto it = adapter_attn_.find(layer); it != adapter_attn_.end()) return adapter_forward(it->second, out);
  if (auto it = compacter_attn_.find(layer); it != compacter_attn_.end())
    return compacter_forward(it->second, compacter_slow_, out);
  return out;
}

Tensor AdaptedModel::after_mlp(std::size_t layer, const Tensor& out) const {
  if (auto it = adapter_mlp_.find(layer); it != adapter_mlp_.end()) return adapter_forward(it->second, out);
  if (auto it = compacter_mlp_.find(layer); it != compacter_mlp_.end())
    return compacter_forward(it->second, compacter_slow_, out);
  return out;
}

Tensor AdaptedModel::before_norm(const Tensor& x) const {
  if (probe_.empty()) return x;
  std::map<std::string, Tensor> table(probe_.begin(), probe_.end());
  auto lookup = [&](const std::string& path) { return table.at(path); };
  return encoder_block(base_.config(), "delta.probe", lookup, x, base_.config().num_layers,
                       AttentionVariant::plain(), nullptr);
}

Tensor AdaptedModel::forward(const Tensor& images) const { return base_.forward(images, variant_, this); }

ViTModel AdaptedModel::merge() const {
  if (!strategy_.mergeable()) {
    throw std::logic_error(strategy_.name() + " adds modules to the forward pass and cannot be merged");
  }
  ViTModel merged = base_.clone();
  NoGradScope no_grad;
  for (const auto& [path, t] : base_.parameters()) {
    Tensor folded = param(path, t);
    if (!folded.same_storage(t)) merged.set(path, folded.detach());
  }
  for (const auto& entry : merged.parameters()) Tensor(entry.second).set_requires_grad(false);
  return merged;
}

AdaptedModel AdaptedModel::clone() const {
  AdaptedModel copy(base_, strategy_, seed_);
  for (std::size_t i = 0; i < injected_.size(); ++i) {
    auto dst = copy.injected_[i].second.mutable_values();
    auto src = injected_[i].second.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return copy;
}

Checkpoint AdaptedModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.meta["config"] = base_.config().to_json();
  ckpt.meta["strategy"] = strategy_.to_json();
  ckpt.meta["seed"] = seed_;
  ckpt.tensors = base_.parameters();
  for (const auto& entry : injected_) ckpt.tensors.push_back(entry);
  return ckpt;
}

AdaptedModel AdaptedModel::from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("strategy")) throw std::runtime_error("checkpoint has no adaptation strategy");
  ViTModel base = model_from_checkpoint(ckpt);
  AdaptedModel adapted(base, AdaptStrategy::from_json(ckpt.meta.at("strategy")),
                       ckpt.meta.value("seed", std::uint64_t{0}));
  std::map<std::string, Tensor> stored;
  for (const auto& [path, t] : ckpt.tensors)
    if (starts_with(path, "delta.")) stored.emplace(path, t);
  if (stored.size() != adapted.injected_.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(stored.size()) + " delta tensors, strategy " +
                             adapted.strategy_.name() + " expects " + std::to_string(adapted.injected_.size()));
  }
  for (auto& [path, t] : adapted.injected_) {
    auto it = stored.find(path);
    if (it == stored.end()) throw std::runtime_error("checkpoint is missing delta tensor '" + path + "'");
    if (it->second.shape() != t.shape()) {
      throw ShapeError("delta tensor '" + path + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(t.shape()));
    }
    auto src = it->second.values();
    std::copy(src.begin(), src.end(), t.mutable_values().begin());
  }
  return adapted;
}

}  // namespace kadapt
