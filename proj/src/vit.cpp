// SPDX-License-Identifier: Apache-2.0
#include "kadapt/vit.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "kadapt/ops.hpp"

namespace kadapt {

void ViTConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("ViTConfig: ") + name + " must be positive");
  };
  positive(image_size, "image_size");
  positive(patch_size, "patch_size");
  positive(channels, "channels");
  positive(d_model, "d_model");
  positive(num_heads, "num_heads");
  positive(num_layers, "num_layers");
  positive(mlp_ratio, "mlp_ratio");
  positive(num_classes, "num_classes");
  if (image_size % patch_size != 0) {
    throw std::invalid_argument("ViTConfig: image_size " + std::to_string(image_size) +
                                " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (d_model % num_heads != 0) {
    throw std::invalid_argument("ViTConfig: d_model " + std::to_string(d_model) +
                                " is not divisible by num_heads " + std::to_string(num_heads));
  }
}

nlohmann::json ViTConfig::to_json() const {
  return {{"image_size", image_size}, {"patch_size", patch_size},   {"channels", channels},
          {"d_model", d_model},       {"num_heads", num_heads},     {"num_layers", num_layers},
          {"mlp_ratio", mlp_ratio},   {"num_classes", num_classes}, {"class_token", class_token}};
}

ViTConfig ViTConfig::from_json(const nlohmann::json& j) {
  ViTConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.class_token = j.value("class_token", true);
  c.validate();
  return c;
}

const char* to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::plain: return "plain";
    case AttentionMode::lepe: return "lepe";
    case AttentionMode::rpb: return "rpb";
  }
  return "?";
}

AttentionMode attention_mode_from_string(const std::string& name) {
  if (name == "plain") return AttentionMode::plain;
  if (name == "lepe") return AttentionMode::lepe;
  if (name == "rpb") return AttentionMode::rpb;
  throw std::invalid_argument("unknown attention mode '" + name + "'");
}

AttentionVariant AttentionVariant::lepe(const ViTConfig& cfg, std::size_t kernel) {
  if (kernel % 2 == 0) throw std::invalid_argument("lepe kernel size must be odd");
  AttentionVariant v;
  v.mode = AttentionMode::lepe;
  v.lepe_kernel = kernel;
  for (std::size_t l = 0; l < cfg.num_layers; ++l)
    v.lepe_kernels.emplace_back(Shape{cfg.d_model, kernel, kernel});
  return v;
}

AttentionVariant AttentionVariant::rpb(const ViTConfig& cfg) {
  AttentionVariant v;
  v.mode = AttentionMode::rpb;
  const std::size_t span = 2 * cfg.grid_side() - 1;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    v.rpb_tables.emplace_back(Shape{span * span});
    v.rpb_cls.emplace_back(Shape{1});
  }
  return v;
}

std::vector<std::pair<std::string, Tensor>> AttentionVariant::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t l = 0; l < lepe_kernels.size(); ++l)
    out.emplace_back("block." + std::to_string(l) + ".attn.lepe.kernel", lepe_kernels[l]);
  for (std::size_t l = 0; l < rpb_tables.size(); ++l) {
    out.emplace_back("block." + std::to_string(l) + ".attn.rpb.table", rpb_tables[l]);
    out.emplace_back("block." + std::to_string(l) + ".attn.rpb.cls", rpb_cls[l]);
  }
  return out;
}

std::vector<std::size_t> rpb_index(const ViTConfig& cfg) {
  const std::size_t side = cfg.grid_side();
  const std::size_t span = 2 * side - 1;
  const std::size_t cls_slot = span * span;
  const std::size_t offset = cfg.class_token ? 1 : 0;
  const std::size_t tokens = cfg.seq_len();
  std::vector<std::size_t> index(tokens * tokens, cls_slot);
  for (std::size_t i = offset; i < tokens; ++i) {
    const std::size_t yi = (i - offset) / side, xi = (i - offset) % side;
    for (std::size_t j = offset; j < tokens; ++j) {
      const std::size_t yj = (j - offset) / side, xj = (j - offset) % side;
      index[i * tokens + j] = (yi + side - 1 - yj) * span + (xi + side - 1 - xj);
    }
  }
  return index;
}

namespace {

Tensor linear(const Tensor& x2d, const Tensor& w, const Tensor& b) {
  return ops::add_broadcast(ops::matmul(x2d, w), b);
}

// [b*T, d] -> [b*H, T, hd]
Tensor split_heads(const Tensor& x, std::size_t b, std::size_t t, std::size_t h, std::size_t hd) {
  return ops::reshape(ops::permute(ops::reshape(x, {b, t, h, hd}), {0, 2, 1, 3}), {b * h, t, hd});
}

// [b*H, T, hd] -> [b, T, d]
Tensor merge_heads(const Tensor& x, std::size_t b, std::size_t t, std::size_t h, std::size_t hd) {
  return ops::reshape(ops::permute(ops::reshape(x, {b, h, t, hd}), {0, 2, 1, 3}), {b, t, h * hd});
}

}  // namespace

NamedTensors make_block_params(const ViTConfig& cfg, const std::string& prefix, Rng& rng) {
  const std::size_t d = cfg.d_model, hidden = cfg.mlp_hidden();
  const double bound_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double bound_h = 1.0 / std::sqrt(static_cast<double>(hidden));
  NamedTensors out;
  auto add = [&](const std::string& name, Tensor t) { out.emplace_back(prefix + "." + name, t); };
  add("ln1.gamma", Tensor(Shape{d}, 1.0));
  add("ln1.beta", Tensor(Shape{d}));
  for (const char* proj : {"q", "k", "v", "o"}) {
    add(std::string("attn.W") + proj, rng.uniform_tensor({d, d}, bound_d));
    add(std::string("attn.b") + proj, Tensor(Shape{d}));
  }
  add("ln2.gamma", Tensor(Shape{d}, 1.0));
  add("ln2.beta", Tensor(Shape{d}));
  add("mlp.W1", rng.uniform_tensor({d, hidden}, bound_d));
  add("mlp.b1", Tensor(Shape{hidden}));
  add("mlp.W2", rng.uniform_tensor({hidden, d}, bound_h));
  add("mlp.b2", Tensor(Shape{d}));
  return out;
}

Tensor encoder_block(const ViTConfig& cfg, const std::string& prefix, const ParamLookup& lookup,
                     const Tensor& x, std::size_t layer, const AttentionVariant& variant,
                     const ForwardHooks* hooks) {
  const std::size_t b = x.dim(0), t = x.dim(1), d = cfg.d_model;
  const std::size_t h = cfg.num_heads, hd = cfg.head_dim();
  auto p = [&](const char* name) { return lookup(prefix + "." + name); };

  Tensor normed = ops::reshape(ops::layernorm(x, p("ln1.gamma"), p("ln1.beta")), {b * t, d});
  Tensor q = linear(normed, p("attn.Wq"), p("attn.bq"));
  Tensor k = linear(normed, p("attn.Wk"), p("attn.bk"));
  Tensor v = linear(normed, p("attn.Wv"), p("attn.bv"));

  Tensor qh = split_heads(q, b, t, h, hd);
  Tensor kt = ops::reshape(ops::permute(ops::reshape(k, {b, t, h, hd}), {0, 2, 3, 1}), {b * h, hd, t});
  Tensor vh = split_heads(v, b, t, h, hd);

  Tensor scores = ops::scale(ops::bmm(qh, kt), 1.0 / std::sqrt(static_cast<double>(hd)));
  if (variant.mode == AttentionMode::rpb) {
    Tensor table = ops::concat(std::vector<Tensor>{variant.rpb_tables.at(layer), variant.rpb_cls.at(layer)}, 0);
    scores = ops::add_broadcast(scores, ops::gather(table, rpb_index(cfg), {t, t}));
  }
  Tensor probs = ops::softmax(scores, -1);
  if (hooks) hooks->observe_attention(layer, probs);

  Tensor context = merge_heads(ops::bmm(probs, vh), b, t, h, hd);
  if (variant.mode == AttentionMode::lepe) {
    // The class token has no grid position; its LePE term is zero.
    Tensor grid = ops::reshape(v, {b, t, d});
    if (cfg.class_token) grid = ops::slice(grid, 1, 1, t - 1);
    Tensor conv = ops::dwconv2d(grid, variant.lepe_kernels.at(layer), false);
    if (cfg.class_token) conv = ops::concat(std::vector<Tensor>{Tensor(Shape{b, 1, d}), conv}, 1);
    context = ops::add(context, conv);
  }
  if (hooks) context = hooks->inside_attention(layer, context);

  Tensor attn = ops::reshape(linear(ops::reshape(context, {b * t, d}), p("attn.Wo"), p("attn.bo")), {b, t, d});
  if (hooks) attn = hooks->after_attention(layer, attn);
  Tensor y = ops::add(x, attn);

  Tensor normed2 = ops::reshape(ops::layernorm(y, p("ln2.gamma"), p("ln2.beta")), {b * t, d});
  Tensor hidden = ops::gelu(linear(normed2, p("mlp.W1"), p("mlp.b1")));
  Tensor mlp = ops::reshape(linear(hidden, p("mlp.W2"), p("mlp.b2")), {b, t, d});
  if (hooks) mlp = hooks->after_mlp(layer, mlp);
  return ops::add(y, mlp);
}

ViTModel::ViTModel(const ViTConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t d = cfg.d_model;
  auto add = [&](const std::string& path, Tensor t) { params_.emplace_back(path, std::move(t)); };
  add("patch_embed.W", rng.uniform_tensor({cfg.patch_dim(), d},
                                          1.0 / std::sqrt(static_cast<double>(cfg.patch_dim()))));
  add("patch_embed.b", Tensor(Shape{d}));
  if (cfg.class_token) add("cls_token", rng.normal_tensor({d}, 0.02));
  add("pos_embed", rng.normal_tensor({cfg.seq_len(), d}, 0.02));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    for (auto& entry : make_block_params(cfg, "block." + std::to_string(l), rng)) params_.push_back(entry);
  }
  add("norm.gamma", Tensor(Shape{d}, 1.0));
  add("norm.beta", Tensor(Shape{d}));
  add("head.W", rng.uniform_tensor({d, cfg.num_classes}, 1.0 / std::sqrt(static_cast<double>(d))));
  add("head.b", Tensor(Shape{cfg.num_classes}));
  for (std::size_t i = 0; i < params_.size(); ++i) index_.emplace(params_[i].first, i);
}

const Tensor& ViTModel::at(const std::string& path) const {
  auto it = index_.find(path);
  if (it == index_.end()) throw std::out_of_range("unknown parameter path '" + path + "'");
  return params_[it->second].second;
}

void ViTModel::set(const std::string& path, const Tensor& value) {
  auto it = index_.find(path);
  if (it == index_.end()) throw std::out_of_range("unknown parameter path '" + path + "'");
  auto& slot = params_[it->second].second;
  if (slot.shape() != value.shape()) {
    throw ShapeError("parameter '" + path + "' has shape " + shape_str(slot.shape()) +
                     ", got " + shape_str(value.shape()));
  }
  slot = value;
}

std::vector<ParamInfo> ViTModel::param_paths() const {
  std::vector<ParamInfo> out;
  out.reserve(params_.size());
  for (const auto& [path, t] : params_) out.push_back({path, t.shape(), t.numel()});
  return out;
}

std::size_t ViTModel::parameter_count() const {
  std::size_t total = 0;
  for (const auto& entry : params_) total += entry.second.numel();
  return total;
}

ViTModel ViTModel::clone() const {
  ViTModel copy;
  copy.cfg_ = cfg_;
  copy.index_ = index_;
  copy.params_.reserve(params_.size());
  for (const auto& [path, t] : params_) copy.params_.emplace_back(path, t.clone());
  return copy;
}

Tensor ViTModel::lookup(const std::string& path, const ForwardHooks* hooks) const {
  const Tensor& base = at(path);
  return hooks ? hooks->param(path, base) : base;
}

Tensor extract_patches(const ViTConfig& cfg, const Tensor& images) {
  const Shape expect{cfg.channels, cfg.image_size, cfg.image_size};
  if (images.rank() != 4 || !std::equal(expect.begin(), expect.end(), images.shape().begin() + 1)) {
    throw ShapeError("vit: expected images [b," + std::to_string(cfg.channels) + "," +
                     std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
                     "], got " + shape_str(images.shape()));
  }
  const std::size_t b = images.dim(0), c = cfg.channels, s = cfg.image_size, p = cfg.patch_size;
  const std::size_t side = cfg.grid_side(), pd = cfg.patch_dim();
  std::vector<double> out(b * side * side * pd);
  auto in = images.values();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t gy = 0; gy < side; ++gy)
      for (std::size_t gx = 0; gx < side; ++gx) {
        double* dst = out.data() + ((n * side + gy) * side + gx) * pd;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t py = 0; py < p; ++py)
            for (std::size_t px = 0; px < p; ++px)
              *dst++ = in[((n * c + ch) * s + gy * p + py) * s + gx * p + px];
      }
  return Tensor(Shape{b * side * side, pd}, std::move(out));
}

Tensor ViTModel::features(const Tensor& images, const AttentionVariant& variant,
                          const ForwardHooks* hooks) const {
  const std::size_t b = images.rank() == 4 ? images.dim(0) : 0;
  Tensor patches = extract_patches(cfg_, images);
  const std::size_t d = cfg_.d_model, np = cfg_.num_patches();
  auto get = [&](const std::string& path) { return lookup(path, hooks); };

  Tensor x = ops::reshape(linear(patches, get("patch_embed.W"), get("patch_embed.b")), {b, np, d});
  if (cfg_.class_token) {
    Tensor cls = ops::expand(ops::reshape(get("cls_token"), {1, d}), b);
    x = ops::concat(std::vector<Tensor>{cls, x}, 1);
  }
  x = ops::add_broadcast(x, get("pos_embed"));
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    x = encoder_block(cfg_, "block." + std::to_string(l), get, x, l, variant, hooks);
  }
  if (hooks) x = hooks->before_norm(x);
  x = ops::layernorm(x, get("norm.gamma"), get("norm.beta"));
  const std::size_t t = x.dim(1);
  if (cfg_.class_token) return ops::reshape(ops::slice(x, 1, 0, 1), {b, d});
  Tensor avg(Shape{t, 1}, 1.0 / static_cast<double>(t));
  Tensor cols = ops::reshape(ops::permute(x, {0, 2, 1}), {b * d, t});
  return ops::reshape(ops::matmul(cols, avg), {b, d});
}

Tensor ViTModel::forward(const Tensor& images, const AttentionVariant& variant,
                         const ForwardHooks* hooks) const {
  Tensor f = features(images, variant, hooks);
  return linear(f, lookup("head.W", hooks), lookup("head.b", hooks));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'K', 'A', 'D', 'P', 'C', 'K', 'P', '1'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    std::reverse(bytes, bytes + sizeof(T));
    std::memcpy(&v, bytes, sizeof(T));
  }
  return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format"] = 1;
  manifest["meta"] = ckpt.meta;
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [path, t] : ckpt.tensors) {
    manifest["tensors"].push_back({{"path", path}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
  }
  const std::string text = manifest.dump();
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + file.string() + "' for writing");
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = to_little<std::uint64_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& entry : ckpt.tensors) {
    for (double v : entry.second.values()) {
      const double le = to_little(v);
      out.write(reinterpret_cast<const char*>(&le), sizeof le);
    }
  }
  if (!out) throw std::runtime_error("write failed for '" + file.string() + "'");
}

Checkpoint read_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + file.string() + "'");
  const std::string name = "checkpoint '" + file.string() + "'";
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw std::runtime_error(name + ": bad magic");
  }
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof len)) throw std::runtime_error(name + ": truncated header");
  len = to_little(len);
  const auto file_size = std::filesystem::file_size(file);
  if (len > file_size) throw std::runtime_error(name + ": manifest length exceeds file size");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw std::runtime_error(name + ": truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(name + ": malformed manifest: " + e.what());
  }
  std::vector<double> payload((file_size - sizeof magic - sizeof len - len) / sizeof(double));
  if ((file_size - sizeof magic - sizeof len - len) % sizeof(double) != 0) {
    throw std::runtime_error(name + ": payload is not a whole number of float64 values");
  }
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(double)));
  for (auto& v : payload) v = to_little(v);

  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  std::size_t expected_offset = 0;
  try {
    for (const auto& entry : manifest.at("tensors")) {
      const auto path = entry.at("path").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const std::size_t count = shape_numel(shape);
      if (offset != expected_offset || offset + count > payload.size()) {
        throw std::runtime_error(name + ": tensor '" + path + "' " + shape_str(shape) + " at offset " +
                                 std::to_string(offset) + " does not fit the payload");
      }
      ckpt.tensors.emplace_back(path, Tensor(shape, std::vector<double>(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                                                                        payload.begin() + static_cast<std::ptrdiff_t>(offset + count))));
      expected_offset = offset + count;
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(name + ": malformed manifest: " + e.what());
  }
  if (expected_offset != payload.size()) {
    throw std::runtime_error(name + ": payload has " + std::to_string(payload.size() - expected_offset) +
                             " trailing values");
  }
  return ckpt;
}

void save_model(const std::filesystem::path& file, const ViTModel& model, const nlohmann::json& extra_meta) {
  Checkpoint ckpt;
  ckpt.meta = extra_meta;
  ckpt.meta["config"] = model.config().to_json();
  ckpt.tensors = model.parameters();
  write_checkpoint(file, ckpt);
}

ViTModel model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("config")) throw std::runtime_error("checkpoint has no model config");
  ViTModel model(ViTConfig::from_json(ckpt.meta.at("config")), 0);
  std::size_t loaded = 0;
  for (const auto& [path, t] : ckpt.tensors) {
    if (path.rfind("delta.", 0) == 0 || path.find(".attn.lepe.") != std::string::npos ||
        path.find(".attn.rpb.") != std::string::npos) {
      continue;
    }
    if (!model.contains(path)) throw std::runtime_error("checkpoint tensor '" + path + "' is not a model parameter");
    model.set(path, t);
    ++loaded;
  }
  if (loaded != model.parameters().size()) {
    throw std::runtime_error("checkpoint covers " + std::to_string(loaded) + " of " +
                             std::to_string(model.parameters().size()) + " model parameters");
  }
  return model;
}

ViTModel load_model(const std::filesystem::path& file) { return model_from_checkpoint(read_checkpoint(file)); }

}  // namespace kadapt
