// SPDX-License-Identifier: Apache-2.0
#include "kadapt/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <cctype>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

namespace kadapt {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& text) {
  const std::string t = trim(text);
  if (t.empty() || t[0] == '-') throw std::invalid_argument("expected a non-negative integer, got '" + text + "'");
  std::size_t used = 0;
  const unsigned long long v = std::stoull(t, &used);
  if (used != t.size()) throw std::invalid_argument("expected an integer, got '" + text + "'");
  return v;
}

double parse_double(const std::string& text) {
  const std::string t = trim(text);
  std::size_t used = 0;
  const double v = std::stod(t, &used);
  if (used != t.size()) throw std::invalid_argument("expected a number, got '" + text + "'");
  return v;
}

bool parse_bool(const std::string& text) {
  std::string t = trim(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
  if (t == "0" || t == "false" || t == "no" || t == "off") return false;
  throw std::invalid_argument("expected a boolean, got '" + text + "'");
}

// Shortest text that reads back to the same double.
std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  for (int p = 1; p <= 17; ++p) {
    std::ostringstream t;
    t << std::setprecision(p) << v;
    if (std::stod(t.str()) == v) return t.str();
  }
  return os.str();
}

template <class T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>) {
      out += fmt(xs[i]);
    } else {
      out += std::to_string(xs[i]);
    }
  }
  return out;
}

std::vector<std::string> split_list(const std::string& text, const std::string& separators) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (separators.find(c) != std::string::npos) {
      if (!trim(cur).empty()) out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty()) out.push_back(trim(cur));
  return out;
}


// Accessor-based key builders. `ref` maps Settings to the field.
template <class F>
ConfigKey size_key(std::string name, std::string help, F ref) {
  return {std::move(name), std::move(help),
          [ref](Settings& s, const std::string& v) { ref(s) = static_cast<std::size_t>(parse_u64(v)); },
          [ref](const Settings& s) { return std::to_string(ref(const_cast<Settings&>(s))); }};
}

template <class F>
ConfigKey u64_key(std::string name, std::string help, F ref) {
  return {std::move(name), std::move(help), [ref](Settings& s, const std::string& v) { ref(s) = parse_u64(v); },
          [ref](const Settings& s) { return std::to_string(ref(const_cast<Settings&>(s))); }};
}

template <class F>
ConfigKey double_key(std::string name, std::string help, F ref) {
  return {std::move(name), std::move(help), [ref](Settings& s, const std::string& v) { ref(s) = parse_double(v); },
          [ref](const Settings& s) { return fmt(ref(const_cast<Settings&>(s))); }};
}

template <class F>
ConfigKey bool_key(std::string name, std::string help, F ref) {
  return {std::move(name), std::move(help), [ref](Settings& s, const std::string& v) { ref(s) = parse_bool(v); },
          [ref](const Settings& s) { return std::string(ref(const_cast<Settings&>(s)) ? "true" : "false"); }};
}

template <class F>
ConfigKey string_key(std::string name, std::string help, F ref) {
  return {std::move(name), std::move(help), [ref](Settings& s, const std::string& v) { ref(s) = trim(v); },
          [ref](const Settings& s) { return ref(const_cast<Settings&>(s)); }};
}

template <class F>
ConfigKey doubles_key(std::string name, std::string help, F ref) {
  return {std::move(name), std::move(help), [ref](Settings& s, const std::string& v) { ref(s) = parse_doubles(v); },
          [ref](const Settings& s) { return join(ref(const_cast<Settings&>(s))); }};
}

template <class F>
ConfigKey sizes_key(std::string name, std::string help, F ref) {
  return {std::move(name), std::move(help), [ref](Settings& s, const std::string& v) { ref(s) = parse_sizes(v); },
          [ref](const Settings& s) { return join(ref(const_cast<Settings&>(s))); }};
}

std::vector<ConfigKey> train_keys(const std::string& section, TrainConfig& (*ref)(Settings&)) {
  return {
      {section + ".optimizer", "sgd or adamw",
       [ref](Settings& s, const std::string& v) { ref(s).optimizer.kind = optimizer_kind_from_string(trim(v)); },
       [ref](const Settings& s) { return std::string(to_string(ref(const_cast<Settings&>(s)).optimizer.kind)); }},
      double_key(section + ".momentum", "SGD momentum", [ref](Settings& s) -> double& { return ref(s).optimizer.momentum; }),
      double_key(section + ".beta1", "AdamW beta1", [ref](Settings& s) -> double& { return ref(s).optimizer.beta1; }),
      double_key(section + ".beta2", "AdamW beta2", [ref](Settings& s) -> double& { return ref(s).optimizer.beta2; }),
      double_key(section + ".eps", "AdamW epsilon", [ref](Settings& s) -> double& { return ref(s).optimizer.eps; }),
      doubles_key(section + ".lr_grid", "learning rates searched",
                  [ref](Settings& s) -> std::vector<double>& { return ref(s).lr_grid; }),
      doubles_key(section + ".wd_grid", "weight decays searched",
                  [ref](Settings& s) -> std::vector<double>& { return ref(s).wd_grid; }),
      sizes_key(section + ".epochs", "epoch candidates",
                [ref](Settings& s) -> std::vector<std::size_t>& { return ref(s).epochs; }),
      size_key(section + ".batch_size", "minibatch size", [ref](Settings& s) -> std::size_t& { return ref(s).batch_size; }),
      size_key(section + ".eval_every", "validation curve period in epochs, 0 for none",
               [ref](Settings& s) -> std::size_t& { return ref(s).eval_every; }),
      double_key(section + ".max_loss", "batch loss treated as divergence",
                 [ref](Settings& s) -> double& { return ref(s).max_loss; }),
  };
}

TrainConfig& suite_train(Settings& s) { return s.suite.train; }
TrainConfig& id_train(Settings& s) { return s.id.train; }

std::vector<ConfigKey> build_keys() {
  std::vector<ConfigKey> k = {
      size_key("model.image_size", "input side length", [](Settings& s) -> std::size_t& { return s.model.image_size; }),
      size_key("model.patch", "patch side length", [](Settings& s) -> std::size_t& { return s.model.patch_size; }),
      size_key("model.channels", "input channels", [](Settings& s) -> std::size_t& { return s.model.channels; }),
      size_key("model.d_model", "token width", [](Settings& s) -> std::size_t& { return s.model.d_model; }),
      size_key("model.heads", "attention heads", [](Settings& s) -> std::size_t& { return s.model.num_heads; }),
      size_key("model.layers", "encoder blocks", [](Settings& s) -> std::size_t& { return s.model.num_layers; }),
      size_key("model.mlp_ratio", "MLP hidden width over d_model",
               [](Settings& s) -> std::size_t& { return s.model.mlp_ratio; }),
      bool_key("model.class_token", "prepend a class token", [](Settings& s) -> bool& { return s.model.class_token; }),
      string_key("model.checkpoint", "base checkpoint; empty builds the pretrained surrogate",
                 [](Settings& s) -> std::string& { return s.base_checkpoint; }),

      bool_key("pretrain.enabled", "pretrain the surrogate encoder", [](Settings& s) -> bool& { return s.pretrain.enabled; }),
      size_key("pretrain.epochs", "pretext epochs", [](Settings& s) -> std::size_t& { return s.pretrain.epochs; }),
      double_key("pretrain.lr", "pretext learning rate", [](Settings& s) -> double& { return s.pretrain.lr; }),
      size_key("pretrain.batch_size", "pretext batch size", [](Settings& s) -> std::size_t& { return s.pretrain.batch_size; }),
      size_key("pretrain.classes", "pretext classes", [](Settings& s) -> std::size_t& { return s.pretrain.data.classes; }),
      size_key("pretrain.train_per_class", "pretext examples per class",
               [](Settings& s) -> std::size_t& { return s.pretrain.data.train_per_class; }),
      u64_key("pretrain.layout_seed", "pretext class layouts",
              [](Settings& s) -> std::uint64_t& { return s.pretrain.data.layout_seed; }),
      u64_key("pretrain.data_seed", "pretext noise", [](Settings& s) -> std::uint64_t& { return s.pretrain.data.seed; }),
      u64_key("pretrain.seed", "base initialization and pretext batch order",
              [](Settings& s) -> std::uint64_t& { return s.pretrain.seed; }),

      string_key("data.source", "synthetic or idx", [](Settings& s) -> std::string& { return s.data.source; }),
      string_key("data.name", "dataset column name", [](Settings& s) -> std::string& { return s.data.name; }),
      size_key("data.classes", "synthetic classes", [](Settings& s) -> std::size_t& { return s.data.synth.classes; }),
      size_key("data.train_per_class", "synthetic train examples per class",
               [](Settings& s) -> std::size_t& { return s.data.synth.train_per_class; }),
      size_key("data.val_per_class", "synthetic validation examples per class",
               [](Settings& s) -> std::size_t& { return s.data.synth.val_per_class; }),
      size_key("data.test_per_class", "synthetic test examples per class",
               [](Settings& s) -> std::size_t& { return s.data.synth.test_per_class; }),
      size_key("data.cell", "synthetic layout cell side", [](Settings& s) -> std::size_t& { return s.data.synth.patch; }),
      size_key("data.motifs", "synthetic motif dictionary size",
               [](Settings& s) -> std::size_t& { return s.data.synth.motifs; }),
      size_key("data.distinct_cells", "cells where class templates differ, 0 for independent templates",
               [](Settings& s) -> std::size_t& { return s.data.synth.distinct_cells; }),
      double_key("data.amplitude", "motif amplitude", [](Settings& s) -> double& { return s.data.synth.amplitude; }),
      double_key("data.noise_sigma", "pixel noise standard deviation",
                 [](Settings& s) -> double& { return s.data.synth.noise_sigma; }),
      u64_key("data.motif_seed", "motif dictionary", [](Settings& s) -> std::uint64_t& { return s.data.synth.motif_seed; }),
      u64_key("data.layout_seed", "class layouts", [](Settings& s) -> std::uint64_t& { return s.data.synth.layout_seed; }),
      u64_key("data.seed", "synthetic noise", [](Settings& s) -> std::uint64_t& { return s.data.synth.seed; }),
      string_key("data.idx_images", "IDX image file", [](Settings& s) -> std::string& { return s.data.idx_images; }),
      string_key("data.idx_labels", "IDX label file", [](Settings& s) -> std::string& { return s.data.idx_labels; }),
      double_key("data.val_fraction", "IDX validation fraction per class",
                 [](Settings& s) -> double& { return s.data.val_fraction; }),
      double_key("data.test_fraction", "IDX test fraction per class",
                 [](Settings& s) -> double& { return s.data.test_fraction; }),
      u64_key("data.split_seed", "IDX split shuffle", [](Settings& s) -> std::uint64_t& { return s.data.split_seed; }),
      double_key("data.norm_mean", "subtracted from every pixel", [](Settings& s) -> double& { return s.data.norm_mean; }),
      double_key("data.norm_std", "pixel divisor after centering", [](Settings& s) -> double& { return s.data.norm_std; }),
  };
  for (auto& key : train_keys("train", &suite_train)) k.push_back(std::move(key));
  std::vector<ConfigKey> rest = {
      {"protocol.kind", "few_shot or full_shot",
       [](Settings& s, const std::string& v) { s.suite.protocol = protocol_from_string(trim(v)); },
       [](const Settings& s) { return std::string(to_string(s.suite.protocol)); }},
      size_key("protocol.shots", "examples per class in few-shot runs",
               [](Settings& s) -> std::size_t& { return s.suite.few_shot.shots; }),
      {"protocol.seeds", "seeds, one run each",
       [](Settings& s, const std::string& v) {
         s.suite.few_shot.seeds.clear();
         for (auto x : parse_sizes(v)) s.suite.few_shot.seeds.push_back(x);
       },
       [](const Settings& s) { return join(s.suite.few_shot.seeds); }},
      sizes_key("protocol.full_shot_epochs", "full-shot epoch candidates before division",
                [](Settings& s) -> std::vector<std::size_t>& { return s.suite.full_shot_epochs; }),
      size_key("protocol.epoch_divisor", "divides full-shot epoch candidates",
               [](Settings& s) -> std::size_t& { return s.suite.epoch_divisor; }),

      {"bench.strategies", "strategy specs separated by ';'",
       [](Settings& s, const std::string& v) { s.suite.strategies = parse_strategies(v); },
       [](const Settings& s) {
         std::string out;
         for (std::size_t i = 0; i < s.suite.strategies.size(); ++i) {
           if (i) out += "; ";
           out += strategy_spec(s.suite.strategies[i]);
         }
         return out;
       }},
      double_key("bench.m0", "PE parameter scale", [](Settings& s) -> double& { return s.suite.m0; }),
      bool_key("bench.parallel", "run cells on OpenMP threads", [](Settings& s) -> bool& { return s.suite.parallel; }),
      size_key("bench.timing_repeats", "timed inference passes",
               [](Settings& s) -> std::size_t& { return s.suite.timing_repeats; }),

      {"strategy.spec", "strategy for train, e.g. kadaptation:n=4,r=1",
       [](Settings& s, const std::string& v) { s.strategy = AdaptStrategy::parse(trim(v)); },
       [](const Settings& s) { return strategy_spec(s.strategy); }},

      {"id.module", "attention or mlp",
       [](Settings& s, const std::string& v) { s.id.module = submodule_from_string(trim(v)); },
       [](const Settings& s) { return std::string(to_string(s.id.module)); }},
      sizes_key("id.layers", "layers measured", [](Settings& s) -> std::vector<std::size_t>& { return s.id.layers; }),
      sizes_key("id.grid", "ascending subspace dimensions", [](Settings& s) -> std::vector<std::size_t>& { return s.id.grid; }),
      {"id.projection", "fastfood or dense",
       [](Settings& s, const std::string& v) { s.id.projection = projection_kind_from_string(trim(v)); },
       [](const Settings& s) { return std::string(to_string(s.id.projection)); }},
      double_key("id.threshold", "fraction of full accuracy", [](Settings& s) -> double& { return s.id.threshold; }),
      u64_key("id.projection_seed", "projection draw", [](Settings& s) -> std::uint64_t& { return s.id.projection_seed; }),
  };
  for (auto& key : rest) k.push_back(std::move(key));
  for (auto& key : train_keys("id", &id_train)) k.push_back(std::move(key));
  k.push_back(string_key("run.out_dir", "output directory", [](Settings& s) -> std::string& { return s.out_dir; }));
  k.push_back({"run.format", "csv or json",
               [](Settings& s, const std::string& v) {
                 const std::string f = trim(v);
                 if (f != "csv" && f != "json") throw std::invalid_argument("format must be csv or json");
                 s.format = f;
               },
               [](const Settings& s) { return s.format; }});
  return k;
}

const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

}  // namespace

SuiteConfig Settings::default_suite() {
  SuiteConfig c;
  c.strategies = default_strategies();
  c.train.lr_grid = {1e-2, 1e-1};
  c.train.wd_grid = {0.0, 1e-4};
  return c;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

std::vector<double> parse_doubles(const std::string& text) {
  std::vector<double> out;
  for (const auto& item : split_list(text, ", \t")) out.push_back(parse_double(item));
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(text, ", \t")) out.push_back(static_cast<std::size_t>(parse_u64(item)));
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

std::vector<AdaptStrategy> parse_strategies(const std::string& text) {
  std::vector<AdaptStrategy> out;
  for (const auto& item : split_list(text, "; \t\n")) out.push_back(AdaptStrategy::parse(item));
  if (out.empty()) throw std::invalid_argument("empty strategy list");
  return out;
}

std::string strategy_spec(const AdaptStrategy& s) {
  std::string out = to_string(s.kind);
  auto b = [](bool v) { return v ? "1" : "0"; };
  switch (s.kind) {
    case StrategyKind::adapter:
      out += ":bottleneck=" + std::to_string(s.bottleneck) + ",placement=" +
             (s.placement == AdapterPlacement::after_mlp_and_attn ? "after_mlp_and_attn" : "inside_attention") +
             ",bias=" + b(s.adapter_bias);
      break;
    case StrategyKind::adapter_drop:
      out += ":bottleneck=" + std::to_string(s.bottleneck) + ",bias=" + b(s.adapter_bias);
      break;
    case StrategyKind::lora: {
      std::string targets;
      for (std::size_t i = 0; i < s.lora_targets.size(); ++i) targets += (i ? "+" : "") + s.lora_targets[i];
      out += ":r=" + std::to_string(s.rank) + ",targets=" + targets + ",fix_a=" + b(s.fix_a);
      break;
    }
    case StrategyKind::compacter:
      out += ":n=" + std::to_string(s.n) + ",bottleneck=" + std::to_string(s.bottleneck) + ",bias=" + b(s.adapter_bias);
      break;
    case StrategyKind::kadaptation:
      out += ":n=" + std::to_string(s.n) + ",r=" + std::to_string(s.rank) + ",targets=" +
             (s.kron_targets == KronTargets::attention_qv ? "attention_qv" : "mlp") + ",low_rank_slow=" +
             b(s.low_rank_slow) + ",slow_rank=" + std::to_string(s.slow_rank);
      if (s.delta_bias) out += ",bias=1";
      break;
    case StrategyKind::lepe_tune:
      out += ":kernel=" + std::to_string(s.lepe_kernel);
      break;
    default:
      break;
  }
  return out;
}

std::map<std::string, std::string> read_config_file(const std::string& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw std::runtime_error(e.what());
  }
  std::map<std::string, std::string> out;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw std::invalid_argument(path + ": key '" + section + "' is outside a section");
    for (const auto& [key, value] : body) {
      const std::string name = section + "." + key;
      if (!find_key(name)) throw std::invalid_argument(path + ": unknown key '" + name + "'");
      out[name] = value.get_value<std::string>();
    }
  }
  return out;
}

void apply_config(Settings& s, const std::map<std::string, std::string>& values) {
  for (const auto& [name, value] : values) {
    const ConfigKey* key = find_key(name);
    if (!key) throw std::invalid_argument("unknown key '" + name + "'");
    try {
      key->set(s, value);
    } catch (const std::exception& e) {
      throw std::invalid_argument(name + ": " + e.what());
    }
  }
}

std::string dump_config(const Settings& s) {
  std::ostringstream os;
  std::string section;
  for (const auto& k : config_keys()) {
    const auto dot = k.name.find('.');
    const std::string sec = k.name.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) os << '\n';
      os << '[' << sec << "]\n";
      section = sec;
    }
    os << k.name.substr(dot + 1) << " = " << k.get(s) << '\n';
  }
  return os.str();
}

Tensor pad_or_crop(const Tensor& images, std::size_t size) {
  const auto& sh = images.shape();
  if (sh.size() != 4) throw std::invalid_argument("pad_or_crop expects [n, c, h, w]");
  const std::size_t n = sh[0], c = sh[1], h = sh[2], w = sh[3];
  if (h == size && w == size) return images.clone();
  Tensor out({n, c, size, size});
  auto src = images.values();
  auto dst = out.mutable_values();
  // Signed offsets: positive pads, negative crops, centered.
  const auto oy = (static_cast<std::ptrdiff_t>(size) - static_cast<std::ptrdiff_t>(h)) / 2;
  const auto ox = (static_cast<std::ptrdiff_t>(size) - static_cast<std::ptrdiff_t>(w)) / 2;
  for (std::size_t i = 0; i < n * c; ++i) {
    for (std::size_t y = 0; y < size; ++y) {
      const auto sy = static_cast<std::ptrdiff_t>(y) - oy;
      if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
      for (std::size_t x = 0; x < size; ++x) {
        const auto sx = static_cast<std::ptrdiff_t>(x) - ox;
        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
        dst[(i * size + y) * size + x] = src[(i * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
      }
    }
  }
  return out;
}

Splits load_data(const Settings& s) {
  Splits splits;
  if (s.data.source == "synthetic") {
    SynthSpec spec = s.data.synth;
    spec.image_size = s.model.image_size;
    spec.channels = s.model.channels;
    splits = synth_dataset(spec);
  } else if (s.data.source == "idx") {
    if (s.model.channels != 1) throw std::invalid_argument("IDX images have one channel; set model.channels = 1");
    Dataset all = load_idx(s.data.idx_images, s.data.idx_labels);
    all.images = pad_or_crop(all.images, s.model.image_size);
    splits = split_dataset(all, s.data.val_fraction, s.data.test_fraction, s.data.split_seed);
  } else {
    throw std::invalid_argument("data.source must be synthetic or idx, got '" + s.data.source + "'");
  }
  for (Dataset* d : {&splits.train, &splits.val, &splits.test}) normalize(*d, s.data.norm_mean, s.data.norm_std);
  return splits;
}

ViTModel load_base(const Settings& s, std::size_t num_classes) {
  if (!s.base_checkpoint.empty()) {
    ViTModel m = model_from_checkpoint(read_checkpoint(s.base_checkpoint));
    if (m.config().num_classes != num_classes) {
      throw std::invalid_argument("checkpoint head has " + std::to_string(m.config().num_classes) +
                                  " classes, data has " + std::to_string(num_classes));
    }
    return m;
  }
  ViTConfig cfg = s.model;
  cfg.num_classes = num_classes;
  PretrainSpec spec = s.pretrain;
  spec.data.image_size = cfg.image_size;
  spec.data.channels = cfg.channels;
  return build_surrogate(cfg, spec);
}

}  // namespace kadapt
