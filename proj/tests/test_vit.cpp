// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "kadapt/vit.hpp"
#include "test_util.hpp"

using namespace kadapt;
using testing::bit_equal;

namespace {

ViTConfig small_config() {
  ViTConfig cfg;
  cfg.d_model = 32;
  cfg.num_layers = 2;
  cfg.num_heads = 4;
  return cfg;
}

Tensor random_images(const ViTConfig& cfg, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  return rng.uniform_tensor({batch, cfg.channels, cfg.image_size, cfg.image_size}, 1.0);
}

// Randomizes variant tensors so normalization checks are not trivially met.
void randomize(AttentionVariant& v, Rng& rng) {
  for (auto& [path, t] : v.parameters()) {
    (void)path;
    auto vals = t.mutable_values();
    for (auto& x : vals) x = rng.uniform(-1.0, 1.0);
  }
}

class AttentionRecorder : public ForwardHooks {
 public:
  mutable std::vector<Tensor> probs;
  mutable std::vector<Tensor> contexts;
  void observe_attention(std::size_t, const Tensor& p) const override { probs.push_back(p); }
  Tensor inside_attention(std::size_t, const Tensor& c) const override {
    contexts.push_back(c);
    return c;
  }
};

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("kadapt_test_" + name);
}

}  // namespace

TEST_CASE("config validation") {
  ViTConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.patch_size = 5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ViTConfig{};
  cfg.num_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK(ViTConfig::from_json(ViTConfig::tiny().to_json()) == ViTConfig::tiny());
}

TEST_CASE("forward shape contract") {
  ViTConfig cfg = small_config();
  ViTModel model(cfg, 1);
  Tensor logits = model.forward(random_images(cfg, 2, 3));
  CHECK(logits.shape() == Shape{2, 10});
  for (double v : logits.values()) CHECK(std::isfinite(v));
  CHECK_THROWS_AS(model.forward(Tensor(Shape{2, 1, 8, 8})), ShapeError);
  CHECK_THROWS_AS(model.forward(Tensor(Shape{2, 2, 16, 16})), ShapeError);
}

TEST_CASE("single-token sequence attends to itself with weight one") {
  ViTConfig cfg = small_config();
  cfg.image_size = 4;
  cfg.class_token = false;
  ViTModel model(cfg, 5);
  Tensor images = random_images(cfg, 3, 6);
  AttentionRecorder rec;
  model.forward(images, {}, &rec);
  REQUIRE(rec.probs.size() == cfg.num_layers);
  for (double p : rec.probs[0].values()) CHECK(p == 1.0);

  // Independent recomputation of layer 0's value projection.
  Tensor x = ops::matmul(extract_patches(cfg, images), model.at("patch_embed.W"));
  x = ops::reshape(ops::add_broadcast(x, model.at("patch_embed.b")), {3, 1, cfg.d_model});
  x = ops::add_broadcast(x, model.at("pos_embed"));
  x = ops::reshape(ops::layernorm(x, model.at("block.0.ln1.gamma"), model.at("block.0.ln1.beta")),
                   {3, cfg.d_model});
  Tensor v = ops::add_broadcast(ops::matmul(x, model.at("block.0.attn.Wv")), model.at("block.0.attn.bv"));
  CHECK(bit_equal(rec.contexts[0].values(), v.values()));
  CHECK(rec.contexts[0].shape() == Shape{3, 1, cfg.d_model});
}

TEST_CASE("zero rpb table matches the plain variant") {
  ViTConfig cfg = small_config();
  ViTModel model(cfg, 7);
  Tensor images = random_images(cfg, 2, 8);
  auto plain = model.forward(images).to_vector();
  auto rpb = model.forward(images, AttentionVariant::rpb(cfg)).to_vector();
  auto lepe = model.forward(images, AttentionVariant::lepe(cfg)).to_vector();
  for (std::size_t i = 0; i < plain.size(); ++i) {
    CHECK(std::abs(plain[i] - rpb[i]) <= 1e-12);
    CHECK(std::abs(plain[i] - lepe[i]) <= 1e-12);
  }
}

TEST_CASE("rpb index layout") {
  ViTConfig cfg = small_config();
  const std::size_t side = cfg.grid_side(), span = 2 * side - 1;
  auto variant = AttentionVariant::rpb(cfg);
  CHECK(variant.rpb_tables[0].numel() == span * span);
  auto index = rpb_index(cfg);
  const std::size_t t = cfg.seq_len();
  for (std::size_t j = 0; j < t; ++j) {
    CHECK(index[j] == span * span);
    CHECK(index[j * t] == span * span);
  }
  // Diagonal is offset (0,0); the same offset always maps to the same slot.
  for (std::size_t i = 1; i < t; ++i) CHECK(index[i * t + i] == (side - 1) * span + (side - 1));
  CHECK(index[1 * t + 2] == index[5 * t + 6]);
}

TEST_CASE("attention rows sum to one for every variant") {
  ViTConfig cfg = small_config();
  ViTModel model(cfg, 9);
  Rng rng(10);
  Tensor images = random_images(cfg, 2, 11);
  std::vector<AttentionVariant> variants{AttentionVariant::plain(), AttentionVariant::lepe(cfg),
                                         AttentionVariant::rpb(cfg)};
  for (auto& v : variants) {
    randomize(v, rng);
    AttentionRecorder rec;
    model.forward(images, v, &rec);
    for (const auto& p : rec.probs) {
      const std::size_t t = p.dim(2);
      for (std::size_t r = 0; r < p.numel() / t; ++r) {
        double total = 0.0;
        for (std::size_t j = 0; j < t; ++j) total += p.values()[r * t + j];
        CHECK(std::abs(total - 1.0) <= 1e-9);
      }
    }
  }
}

TEST_CASE("batch permutation permutes logits") {
  ViTConfig cfg = small_config();
  ViTModel model(cfg, 12);
  Tensor images = random_images(cfg, 4, 13);
  const std::size_t per = images.numel() / 4;
  std::vector<std::size_t> order{2, 0, 3, 1};
  std::vector<double> permuted;
  for (auto i : order)
    permuted.insert(permuted.end(), images.values().begin() + static_cast<std::ptrdiff_t>(i * per),
                    images.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
  auto a = model.forward(images).to_vector();
  auto b = model.forward(Tensor(images.shape(), permuted)).to_vector();
  const std::size_t c = cfg.num_classes;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < c; ++j) CHECK(b[r * c + j] == a[order[r] * c + j]);
}

TEST_CASE("param_paths") {
  ViTConfig cfg = small_config();
  ViTModel model(cfg, 14);
  auto paths = model.param_paths();
  bool found = false;
  std::size_t total = 0;
  for (const auto& p : paths) {
    total += p.count;
    if (p.path == "block.0.attn.Wq") {
      found = true;
      CHECK(p.shape == Shape{32, 32});
    }
  }
  CHECK(found);
  CHECK(total == model.parameter_count());

  // Closed form for d=32, L=2, patch 4x4x1, 17 tokens, hidden 128, 10 classes.
  const std::size_t d = 32, L = 2, pd = 16, tokens = 17, hid = 128, classes = 10;
  const std::size_t embed = pd * d + d + d + tokens * d;
  const std::size_t block = 2 * 2 * d + 4 * (d * d + d) + d * hid + hid + hid * d + d;
  const std::size_t tail = 2 * d + d * classes + classes;
  CHECK(total == embed + L * block + tail);
  CHECK(total == 26922);

  ViTModel again(cfg, 14);
  auto paths2 = again.param_paths();
  REQUIRE(paths.size() == paths2.size());
  for (std::size_t i = 0; i < paths.size(); ++i) {
    CHECK(paths[i].path == paths2[i].path);
    CHECK(bit_equal(model.parameters()[i].second.values(), again.parameters()[i].second.values()));
  }
  // Registry has no duplicate storage.
  for (std::size_t i = 0; i < paths.size(); ++i)
    for (std::size_t j = i + 1; j < paths.size(); ++j)
      CHECK_FALSE(model.parameters()[i].second.same_storage(model.parameters()[j].second));
}

TEST_CASE("clone is deep") {
  ViTModel model(small_config(), 15);
  ViTModel copy = model.clone();
  copy.at("head.W").mutable_values()[0] += 1.0;
  CHECK(copy.at("head.W").values()[0] != model.at("head.W").values()[0]);
  CHECK_THROWS_AS(model.at("block.9.attn.Wq"), std::out_of_range);
}

TEST_CASE("dwconv") {
  const std::size_t side = 4, c = 3;
  Rng rng(16);
  Tensor v = rng.uniform_tensor({2, side * side + 1, c}, 1.0);
  SUBCASE("centered delta kernel is the identity") {
    Tensor k(Shape{c, 3, 3});
    for (std::size_t ch = 0; ch < c; ++ch) k.mutable_values()[ch * 9 + 4] = 1.0;
    CHECK(bit_equal(ops::dwconv2d(v, k, true).values(), v.values()));
  }
  SUBCASE("ones kernel on a constant grid") {
    Tensor constant(Shape{1, side * side, c}, 2.5);
    Tensor ones(Shape{c, 3, 3}, 1.0);
    Tensor out = ops::dwconv2d(constant, ones, false);
    // Direct convolution oracle: count of in-bounds neighbours times the constant.
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        const double ny = (y == 0 || y == side - 1) ? 2 : 3;
        const double nx = (x == 0 || x == side - 1) ? 2 : 3;
        for (std::size_t ch = 0; ch < c; ++ch) CHECK(out.values()[(y * side + x) * c + ch] == ny * nx * 2.5);
      }
    CHECK(out.values()[(1 * side + 1) * c] == 9 * 2.5);
  }
  SUBCASE("class token passes through") {
    Tensor k = rng.uniform_tensor({c, 3, 3}, 1.0);
    Tensor out = ops::dwconv2d(v, k, true);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        CHECK(out.values()[b * (side * side + 1) * c + ch] == v.values()[b * (side * side + 1) * c + ch]);
  }
  SUBCASE("kernel gradient") {
    Tensor k = testing::random_leaf(rng, {c, 3, 3});
    Tensor frozen = v.detach();
    for (int i = 0; i < 5; ++i) {
      double err = testing::gradient_error([&](const std::vector<Tensor>& in) { return ops::dwconv2d(frozen, in[0], true); },
                                           {k}, rng);
      CHECK(err <= 1e-5);
    }
  }
  SUBCASE("non-square grid") {
    CHECK_THROWS_AS(ops::dwconv2d(Tensor(Shape{1, 6, c}), Tensor(Shape{c, 3, 3}), false), ShapeError);
  }
}

TEST_CASE("full forward gradients match finite differences") {
  ViTConfig cfg = small_config();
  cfg.d_model = 16;
  cfg.num_heads = 2;
  ViTModel model(cfg, 17);
  Rng rng(18);
  for (auto& [path, t] : model.parameters()) {
    (void)path;
    // Nonzero biases and affine terms so every path carries signal.
    if (t.rank() == 1 && t.numel() != cfg.seq_len()) {
      for (auto& x : t.mutable_values()) x += rng.uniform(-0.3, 0.3);
    }
    Tensor(t).set_requires_grad(true);
  }
  Tensor images = random_images(cfg, 3, 19);
  std::vector<std::size_t> labels{1, 4, 7};
  auto loss = [&] { return ops::cross_entropy(model.forward(images), labels); };
  {
    Tape tape;
    TapeScope scope(tape);
    ops::backward(loss());
  }
  for (const auto& [path, t] : model.parameters()) {
    CAPTURE(path);
    std::vector<std::size_t> coords;
    for (int i = 0; i < 10; ++i) coords.push_back(rng.index(t.numel()));
    auto numeric = finite_diff_grad_inplace([&] { return loss().item(); }, t, 1e-5, coords);
    std::vector<double> analytic;
    for (auto c : coords) analytic.push_back(t.grad()[c]);
    // Key biases have an exactly zero gradient (softmax shift invariance), so
    // the error is measured against a small absolute floor.
    CHECK(relative_error(analytic, numeric, 1e-6) <= 1e-4);
  }
}

TEST_CASE("checkpoint round trip") {
  ViTConfig cfg = small_config();
  ViTModel model(cfg, 20);
  auto file = temp_file("roundtrip.ckpt");
  save_model(file, model, {{"note", "x"}});
  ViTModel loaded = load_model(file);
  CHECK(loaded.config() == cfg);
  REQUIRE(loaded.parameters().size() == model.parameters().size());
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    CHECK(loaded.parameters()[i].first == model.parameters()[i].first);
    CHECK(bit_equal(loaded.parameters()[i].second.values(), model.parameters()[i].second.values()));
  }
  Checkpoint ckpt = read_checkpoint(file);
  CHECK(ckpt.meta.at("note") == "x");

  SUBCASE("shape mismatch is rejected") {
    ckpt.tensors[0].second = Tensor(Shape{3});
    CHECK_THROWS_AS(model_from_checkpoint(ckpt), ShapeError);
  }
  SUBCASE("truncated payload is rejected") {
    const auto size = std::filesystem::file_size(file);
    std::filesystem::resize_file(file, size - 8);
    CHECK_THROWS_AS(read_checkpoint(file), std::runtime_error);
  }
  SUBCASE("bad magic is rejected") {
    std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_AS(read_checkpoint(file), std::runtime_error);
  }
  std::filesystem::remove(file);
}
