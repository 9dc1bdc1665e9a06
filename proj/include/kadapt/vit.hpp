// SPDX-License-Identifier: Apache-2.0
//
// Small pre-norm vision transformer with a path-addressable parameter
// registry. Linear weights are stored [in, out] and applied as y = x W + b.
//
// Registry paths:
//   patch_embed.W  patch_embed.b  cls_token  pos_embed
//   block.<i>.ln1.gamma  block.<i>.ln1.beta
//   block.<i>.attn.{Wq,bq,Wk,bk,Wv,bv,Wo,bo}
//   block.<i>.ln2.gamma  block.<i>.ln2.beta
//   block.<i>.mlp.{W1,b1,W2,b2}
//   norm.gamma  norm.beta  head.W  head.b
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kadapt/random.hpp"
#include "kadapt/tensor.hpp"

namespace kadapt {

struct ViTConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t d_model = 64;
  std::size_t num_heads = 4;
  std::size_t num_layers = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 10;
  // Without a class token the head reads the mean over patch tokens.
  bool class_token = true;

  // Desk-scale default: 16x16 image, patch 4, width 64, 4 heads, 4 layers.
  static ViTConfig tiny() { return {}; }

  // Throws std::invalid_argument on zero sizes or divisibility violations.
  void validate() const;

  std::size_t grid_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid_side() * grid_side(); }
  std::size_t seq_len() const { return num_patches() + (class_token ? 1 : 0); }
  std::size_t head_dim() const { return d_model / num_heads; }
  std::size_t mlp_hidden() const { return d_model * mlp_ratio; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }

  nlohmann::json to_json() const;
  static ViTConfig from_json(const nlohmann::json& j);
  bool operator==(const ViTConfig&) const = default;
};

enum class AttentionMode { plain, lepe, rpb };

const char* to_string(AttentionMode mode);
AttentionMode attention_mode_from_string(const std::string& name);

// Positional attention extras. lepe adds a depthwise convolution of V to the
// attention context; rpb adds a learned bias, indexed by relative patch
// offset, to the attention logits. Both are zero-initialized so a fresh
// variant reproduces the plain model.
struct AttentionVariant {
  AttentionMode mode = AttentionMode::plain;
  std::size_t lepe_kernel = 3;
  // Per layer [d_model, k, k].
  std::vector<Tensor> lepe_kernels;
  // Per layer [(2 side - 1)^2], row-major over (dy + side - 1, dx + side - 1).
  std::vector<Tensor> rpb_tables;
  // Per layer [1]: shared bias for every interaction involving the class token.
  std::vector<Tensor> rpb_cls;

  static AttentionVariant plain() { return {}; }
  static AttentionVariant lepe(const ViTConfig& cfg, std::size_t kernel = 3);
  static AttentionVariant rpb(const ViTConfig& cfg);

  // (path, tensor) for the variant's parameters, e.g. block.0.attn.rpb.table.
  std::vector<std::pair<std::string, Tensor>> parameters() const;
};

// Index into an rpb table (plus one trailing class slot) for each of the
// seq_len x seq_len attention logits.
std::vector<std::size_t> rpb_index(const ViTConfig& cfg);

// Extension points used by adaptation strategies. Every method defaults to the
// identity so a strategy overrides only what it changes.
class ForwardHooks {
 public:
  virtual ~ForwardHooks() = default;
  // Tensor the forward pass uses in place of registry entry `path`.
  virtual Tensor param(const std::string& path, const Tensor& base) const {
    (void)path;
    return base;
  }
  // Attention context [b, T, d] before the output projection.
  virtual Tensor inside_attention(std::size_t layer, const Tensor& context) const {
    (void)layer;
    return context;
  }
  // Attention sublayer output [b, T, d] before the residual add.
  virtual Tensor after_attention(std::size_t layer, const Tensor& out) const {
    (void)layer;
    return out;
  }
  // MLP sublayer output [b, T, d] before the residual add.
  virtual Tensor after_mlp(std::size_t layer, const Tensor& out) const {
    (void)layer;
    return out;
  }
  // Token states [b, T, d] after the last encoder block, before the final norm.
  virtual Tensor before_norm(const Tensor& x) const { return x; }
  // Attention probabilities [b * heads, T, T] of `layer`.
  virtual void observe_attention(std::size_t layer, const Tensor& probs) const {
    (void)layer;
    (void)probs;
  }
};

struct ParamInfo {
  std::string path;
  Shape shape;
  std::size_t count;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Freshly initialized encoder block parameters named <prefix>.ln1.gamma etc.
NamedTensors make_block_params(const ViTConfig& cfg, const std::string& prefix, Rng& rng);

// One pre-norm block. `lookup` resolves a full parameter path; hooks see the
// same paths. `layer` is reported to the hooks and selects variant tensors.
using ParamLookup = std::function<Tensor(const std::string&)>;
Tensor encoder_block(const ViTConfig& cfg, const std::string& prefix, const ParamLookup& lookup,
                     const Tensor& x, std::size_t layer, const AttentionVariant& variant,
                     const ForwardHooks* hooks);

class ViTModel {
 public:
  ViTModel(const ViTConfig& cfg, std::uint64_t seed);

  const ViTConfig& config() const { return cfg_; }

  // Registry in construction order.
  const NamedTensors& parameters() const { return params_; }
  bool contains(const std::string& path) const { return index_.count(path) != 0; }
  // Throws std::out_of_range for unknown paths.
  const Tensor& at(const std::string& path) const;
  void set(const std::string& path, const Tensor& value);

  std::vector<ParamInfo> param_paths() const;
  std::size_t parameter_count() const;

  // Deep copy: no storage is shared with this model.
  ViTModel clone() const;

  // images [b, c, h, w] -> logits [b, num_classes].
  Tensor forward(const Tensor& images, const AttentionVariant& variant = {},
                 const ForwardHooks* hooks = nullptr) const;
  // Pooled, normalized features [b, d_model] that feed the head.
  Tensor features(const Tensor& images, const AttentionVariant& variant = {},
                  const ForwardHooks* hooks = nullptr) const;

 private:
  ViTModel() = default;
  Tensor lookup(const std::string& path, const ForwardHooks* hooks) const;

  ViTConfig cfg_;
  NamedTensors params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// [b, c, h, w] -> [b * patches, c * p * p], patches row-major over the grid,
// each patch flattened channel-major.
Tensor extract_patches(const ViTConfig& cfg, const Tensor& images);

// Binary checkpoint: 8-byte magic, little-endian u64 manifest length, UTF-8
// JSON manifest, little-endian float64 payload. The manifest holds
// {"format", "meta", "tensors": [{"path", "shape", "offset"}]} with offsets in
// elements from the start of the payload.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  NamedTensors tensors;
};

void write_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt);
// Throws std::runtime_error on a bad magic, malformed manifest, overlapping or
// out-of-range offsets, or a truncated payload.
Checkpoint read_checkpoint(const std::filesystem::path& file);

void save_model(const std::filesystem::path& file, const ViTModel& model,
                const nlohmann::json& extra_meta = nlohmann::json::object());
// Rebuilds the model from the stored config and copies every tensor in,
// checking each stored shape against the registry.
ViTModel load_model(const std::filesystem::path& file);
ViTModel model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace kadapt
