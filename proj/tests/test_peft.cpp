// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <regex>
#include <set>

#include "kadapt/peft.hpp"
#include "test_util.hpp"

using namespace kadapt;
using testing::bit_equal;

namespace {

Tensor images_for(const ViTConfig& cfg, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  return rng.uniform_tensor({batch, cfg.channels, cfg.image_size, cfg.image_size}, 1.0);
}

std::size_t count(const NamedTensors& list) {
  std::size_t total = 0;
  for (const auto& e : list) total += e.second.numel();
  return total;
}

void fill_random(const Tensor& t, Rng& rng, double bound = 0.5) {
  for (auto& v : t.mutable_values()) v = rng.uniform(-bound, bound);
}

std::vector<AdaptStrategy> zero_init_strategies() {
  return {AdaptStrategy::lora(2),          AdaptStrategy::lora(2, true),
          AdaptStrategy::kadaptation(4, 1), AdaptStrategy::kadaptation(4, 2, KronTargets::mlp),
          AdaptStrategy::adapter(8),        AdaptStrategy::adapter(8, AdapterPlacement::inside_attention),
          AdaptStrategy::adapter_drop(8),   AdaptStrategy::compacter(4, 8),
          AdaptStrategy::transformer_probe()};
}

std::vector<AdaptStrategy> all_strategies() {
  auto list = zero_init_strategies();
  for (auto s : {AdaptStrategy::full_finetune(), AdaptStrategy::linear_probe(), AdaptStrategy::bitfit(),
                 AdaptStrategy::layernorm_tune(), AdaptStrategy::attention_tune(), AdaptStrategy::lepe_tune(),
                 AdaptStrategy::rpb_tune()})
    list.push_back(s);
  return list;
}

}  // namespace

TEST_CASE("trainable sets") {
  ViTModel base(ViTConfig::tiny(), 1);
  SUBCASE("linear probe is the head") {
    AdaptedModel m(base, AdaptStrategy::linear_probe(), 0);
    CHECK(count(m.trainable()) == 650);
  }
  SUBCASE("bitfit matches a registry filter") {
    AdaptedModel m(base, AdaptStrategy::bitfit(), 0);
    const std::regex bias(R"(.*\.(b|b[qkvo12]|beta)$)");
    std::size_t expect = 0;
    for (const auto& p : base.param_paths())
      if (std::regex_match(p.path, bias) || p.path == "head.W") expect += p.count;
    CHECK(count(m.trainable()) == expect);
  }
  SUBCASE("full finetune covers the registry") {
    AdaptedModel m(base, AdaptStrategy::full_finetune(), 0);
    CHECK(count(m.trainable()) == base.parameter_count());
  }
  SUBCASE("monotone counts") {
    auto n = [&](const AdaptStrategy& s) { return count(AdaptedModel(base, s, 0).trainable()); };
    const auto full = n(AdaptStrategy::full_finetune());
    const auto attn = n(AdaptStrategy::attention_tune());
    const auto kad = n(AdaptStrategy::kadaptation(4, 1));
    const auto lin = n(AdaptStrategy::linear_probe());
    CHECK(full > attn);
    CHECK(attn > kad);
    CHECK(kad > lin);
    CHECK(kad == 650 + 1088);
  }
  SUBCASE("lora-fix trains only B") {
    AdaptedModel m(base, AdaptStrategy::lora(2, true), 0);
    for (const auto& [path, t] : m.trainable()) CHECK(path.find(".A") == std::string::npos);
    CHECK(count(m.trainable()) == 650 + 4 * 2 * 64 * 2);
  }
}

TEST_CASE("strategy validation") {
  const ViTConfig cfg = ViTConfig::tiny();
  CHECK_THROWS_AS(AdaptStrategy::kadaptation(3, 1).validate(cfg), std::invalid_argument);
  CHECK_THROWS_AS(AdaptStrategy::lora(65).validate(cfg), std::invalid_argument);
  CHECK_THROWS_AS(AdaptStrategy::compacter(4, 6).validate(cfg), std::invalid_argument);
  CHECK_THROWS_AS(AdaptStrategy::adapter(0).validate(cfg), std::invalid_argument);
  CHECK_NOTHROW(AdaptStrategy::kadaptation(32, 1).validate(cfg));
  ViTModel base(cfg, 1);
  CHECK_THROWS_AS(AdaptedModel(base, AdaptStrategy::kadaptation(3, 1), 0), std::invalid_argument);
}

TEST_CASE("strategy text and json forms") {
  auto s = AdaptStrategy::parse("kadaptation:n=4,r=1,targets=mlp");
  CHECK(s.kind == StrategyKind::kadaptation);
  CHECK(s.n == 4);
  CHECK(s.rank == 1);
  CHECK(s.kron_targets == KronTargets::mlp);
  CHECK(AdaptStrategy::parse("lora-fix:r=2").name() == "LoRA-Fix");
  CHECK(AdaptStrategy::parse("lora:targets=Wq").lora_targets == std::vector<std::string>{"Wq"});
  CHECK_THROWS_AS(AdaptStrategy::parse("nope"), std::invalid_argument);
  CHECK_THROWS_AS(AdaptStrategy::parse("lora:r=x"), std::invalid_argument);
  for (const auto& st : all_strategies()) {
    auto back = AdaptStrategy::from_json(st.to_json());
    CHECK(back.to_json() == st.to_json());
  }
}

TEST_CASE("materialize_delta") {
  Rng rng(2);
  SUBCASE("hand example") {
    KronDelta delta(1, 1, rng);
    delta.add_site("w", 2, 2, rng);
    delta.slow(0).mutable_values()[0] = 2.0;
    const auto& site = delta.site("w");
    site.u[0].mutable_values()[0] = 1.0;
    site.u[0].mutable_values()[1] = 2.0;
    site.v[0].mutable_values()[0] = 3.0;
    site.v[0].mutable_values()[1] = 4.0;
    CHECK(delta.materialize("w").to_vector() == std::vector<double>{6, 8, 12, 16});
  }
  SUBCASE("zero fast factors annihilate") {
    KronDelta delta(4, 2, rng);
    delta.add_site("w", 8, 12, rng);
    Tensor dw = delta.materialize("w");
    CHECK(dw.shape() == Shape{8, 12});
    for (double v : dw.values()) CHECK(v == 0.0);
  }
  SUBCASE("compositional oracle") {
    KronDelta delta(2, 2, rng);
    delta.add_site("w", 6, 4, rng);
    const auto& site = delta.site("w");
    for (auto& v : site.v) fill_random(v, rng);
    Tensor expect = ops::add(ops::kron(delta.slow(0), ops::matmul(site.u[0], site.v[0])),
                             ops::kron(delta.slow(1), ops::matmul(site.u[1], site.v[1])));
    CHECK(bit_equal(delta.materialize("w").values(), expect.values()));
  }
  SUBCASE("unregistered site") {
    KronDelta delta(2, 1, rng);
    CHECK_THROWS_AS(delta.materialize("missing"), std::out_of_range);
    CHECK_THROWS_AS(delta.add_site("odd", 3, 4, rng), std::invalid_argument);
  }
  SUBCASE("low-rank slow factors") {
    KronDelta delta(2, 1, rng, true, 1);
    delta.add_site("w", 4, 4, rng);
    for (auto& v : delta.site("w").v) fill_random(v, rng);
    CHECK(delta.parameters().size() == 2 * 2 + 2 * 2);
    CHECK(delta.materialize("w").shape() == Shape{4, 4});
  }
}

TEST_CASE("slow factors are shared by every site") {
  ViTModel base(ViTConfig::tiny(), 3);
  for (auto targets : {KronTargets::attention_qv, KronTargets::mlp}) {
    AdaptedModel m(base, AdaptStrategy::kadaptation(4, 1, targets), 4);
    std::size_t slow = 0;
    for (const auto& [path, t] : m.injected())
      if (path.rfind("delta.slow.", 0) == 0) ++slow;
    CHECK(slow == 4);
    const KronDelta* delta = m.kron_delta();
    REQUIRE(delta != nullptr);
    CHECK(delta->site_names().size() == 2 * base.config().num_layers);
    Rng rng(5);
    for (const auto& name : delta->site_names())
      for (auto& v : delta->site(name).v) fill_random(v, rng);
    std::vector<std::vector<double>> before;
    for (const auto& name : delta->site_names()) before.push_back(delta->materialize(name).to_vector());
    delta->slow(0).mutable_values()[0] += 1.0;
    for (std::size_t i = 0; i < before.size(); ++i)
      CHECK(delta->materialize(delta->site_names()[i]).to_vector() != before[i]);
  }
}

TEST_CASE("zero-init neutrality") {
  ViTModel base(ViTConfig::tiny(), 6);
  Tensor images = images_for(base.config(), 4, 7);
  auto reference = base.forward(images).to_vector();
  for (const auto& s : zero_init_strategies()) {
    CAPTURE(s.name());
    AdaptedModel m(base, s, 8);
    auto logits = m.forward(images).to_vector();
    double worst = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) worst = std::max(worst, std::abs(logits[i] - reference[i]));
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("merge") {
  ViTModel base(ViTConfig::tiny(), 9);
  SUBCASE("zero deltas merge to the base weights") {
    for (const auto& s : {AdaptStrategy::lora(2), AdaptStrategy::kadaptation(4, 1)}) {
      ViTModel merged = AdaptedModel(base, s, 1).merge();
      for (std::size_t i = 0; i < base.parameters().size(); ++i)
        CHECK(bit_equal(merged.parameters()[i].second.values(), base.parameters()[i].second.values()));
    }
  }
  SUBCASE("perturbed deltas: merged forward equals adapted forward") {
    Rng rng(10);
    for (const auto& s : {AdaptStrategy::lora(2), AdaptStrategy::kadaptation(4, 1),
                          AdaptStrategy::kadaptation(4, 1, KronTargets::mlp)}) {
      AdaptStrategy with_bias = s;
      with_bias.delta_bias = s.kind == StrategyKind::kadaptation;
      AdaptedModel m(base, with_bias, 2);
      for (const auto& [path, t] : m.trainable()) fill_random(t, rng, 0.3);
      ViTModel merged = m.merge();
      double worst = 0.0;
      for (int trial = 0; trial < 100; ++trial) {
        Tensor x = images_for(base.config(), 1, 100 + static_cast<std::uint64_t>(trial));
        auto a = m.forward(x).to_vector();
        auto b = merged.forward(x).to_vector();
        for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
      }
      CHECK(worst <= 1e-9);
    }
  }
  SUBCASE("lora merge equals dense recomposition") {
    Rng rng(11);
    AdaptedModel m(base, AdaptStrategy::lora(2), 3);
    Tensor a, b;
    for (const auto& [path, t] : m.injected()) {
      fill_random(t, rng);
      if (path == "delta.block.1.attn.Wv.A") a = t;
      if (path == "delta.block.1.attn.Wv.B") b = t;
    }
    REQUIRE(a.defined());
    REQUIRE(b.defined());
    ViTModel merged = m.merge();
    const std::size_t d = 64, r = 2;
    auto ba = testing::matmul_oracle(d, r, d, b.to_vector(), a.to_vector());
    auto w0 = base.at("block.1.attn.Wv").values();
    auto w = merged.at("block.1.attn.Wv").values();
    // Stored [in, out]: merged[i][j] = W0[i][j] + (B A)[j][i].
    bool exact = true;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) exact = exact && w[i * d + j] == w0[i * d + j] + ba[j * d + i];
    CHECK(exact);
  }
  SUBCASE("additive strategies refuse to merge") {
    CHECK_THROWS_AS(AdaptedModel(base, AdaptStrategy::adapter(8), 0).merge(), std::logic_error);
    CHECK_THROWS_AS(AdaptedModel(base, AdaptStrategy::compacter(4, 8), 0).merge(), std::logic_error);
    CHECK_THROWS_AS(AdaptedModel(base, AdaptStrategy::bitfit(), 0).merge(), std::logic_error);
  }
}

TEST_CASE("adapter_forward") {
  Rng rng(12);
  SUBCASE("zero up projection is the identity") {
    AdapterBlock block = make_adapter(6, 3, true, rng);
    Tensor x = rng.uniform_tensor({4, 6}, 1.0);
    CHECK(bit_equal(adapter_forward(block, x).values(), x.values()));
  }
  SUBCASE("hand-set bottleneck of one") {
    AdapterBlock block{Tensor(Shape{2, 1}, {1.0, 2.0}), Tensor(Shape{1}, {0.5}), Tensor(Shape{1, 2}, {3.0, -1.0}),
                       Tensor(Shape{2}, {0.1, 0.2})};
    Tensor x(Shape{1, 2}, {1.0, -1.0});
    const double h = 1.0 * 1.0 + (-1.0) * 2.0 + 0.5;
    const double g = 0.5 * h * (1.0 + std::erf(h / std::sqrt(2.0)));
    auto y = adapter_forward(block, x).to_vector();
    CHECK(y[0] == doctest::Approx(1.0 + 3.0 * g + 0.1).epsilon(1e-15));
    CHECK(y[1] == doctest::Approx(-1.0 - g + 0.2).epsilon(1e-15));
  }
  SUBCASE("shape mismatch") {
    AdapterBlock block = make_adapter(6, 3, false, rng);
    CHECK_THROWS_AS(adapter_forward(block, Tensor(Shape{2, 5})), ShapeError);
  }
}

TEST_CASE("compacter") {
  Rng rng(13);
  std::vector<Tensor> slow;
  for (int i = 0; i < 4; ++i) slow.push_back(rng.uniform_tensor({4, 4}, 0.5));
  SUBCASE("zero fast factors give the identity") {
    CompacterBlock block = make_compacter(16, 8, 4, true, rng);
    for (auto& t : block.down_u) fill_random(t, rng);
    for (auto& t : block.up_v)
      for (double v : t.values()) CHECK(v == 0.0);
    Tensor x = rng.uniform_tensor({3, 16}, 1.0);
    CHECK(bit_equal(compacter_forward(block, slow, x).values(), x.values()));
  }
  SUBCASE("projections equal the dense recomposition") {
    CompacterBlock block = make_compacter(16, 8, 4, false, rng);
    for (auto& t : block.up_v) fill_random(t, rng);
    Tensor down = compacter_down(block, slow);
    Tensor up = compacter_up(block, slow);
    CHECK(down.shape() == Shape{16, 8});
    CHECK(up.shape() == Shape{8, 16});
    std::vector<double> expect(16 * 8, 0.0);
    for (int i = 0; i < 4; ++i) {
      auto uv = testing::matmul_oracle(4, 1, 2, block.down_u[static_cast<std::size_t>(i)].to_vector(),
                                       block.down_v[static_cast<std::size_t>(i)].to_vector());
      auto term = testing::kron_oracle(4, 4, slow[static_cast<std::size_t>(i)].to_vector(), 4, 2, uv);
      for (std::size_t j = 0; j < expect.size(); ++j) expect[j] = i == 0 ? term[j] : expect[j] + term[j];
    }
    CHECK(bit_equal(down.values(), expect));
  }
  SUBCASE("slow weights are shared across layers") {
    ViTModel base(ViTConfig::tiny(), 14);
    AdaptedModel m(base, AdaptStrategy::compacter(4, 8), 15);
    std::size_t slow_count = 0;
    for (const auto& [path, t] : m.injected())
      if (path.rfind("delta.compacter.A", 0) == 0) ++slow_count;
    CHECK(slow_count == 4);
    Rng r2(16);
    for (const auto& [path, t] : m.injected())
      if (path.find(".up.v") != std::string::npos) fill_random(t, r2);
    Tensor images = images_for(base.config(), 2, 17);
    auto before = m.forward(images).to_vector();
    Tensor a0;
    for (const auto& [path, t] : m.injected())
      if (path == "delta.compacter.A0") a0 = t;
    a0.mutable_values()[5] += 0.5;
    CHECK(m.forward(images).to_vector() != before);
  }
}

TEST_CASE("delta and adapter forwards pass gradient checks") {
  Rng rng(18);
  using Inputs = std::vector<Tensor>;
  double kron_worst = 0.0, lora_worst = 0.0, adapter_worst = 0.0, compacter_worst = 0.0;
  for (int instance = 0; instance < 20; ++instance) {
    // Kronecker delta as a function of A0, A1, u0, u1, v0, v1.
    Inputs kin{testing::random_leaf(rng, {2, 2}), testing::random_leaf(rng, {2, 2}),
               testing::random_leaf(rng, {3, 2}), testing::random_leaf(rng, {3, 2}),
               testing::random_leaf(rng, {2, 4}), testing::random_leaf(rng, {2, 4})};
    kron_worst = std::max(kron_worst, testing::gradient_error(
                                          [](const Inputs& in) {
                                            return phm_weight(std::vector<Tensor>{in[0], in[1]},
                                                              std::vector<Tensor>{in[2], in[3]},
                                                              std::vector<Tensor>{in[4], in[5]});
                                          },
                                          kin, rng));
    Tensor w0 = rng.uniform_tensor({5, 5}, 1.0);
    Inputs lin{testing::random_leaf(rng, {2, 5}), testing::random_leaf(rng, {5, 2})};
    lora_worst = std::max(lora_worst, testing::gradient_error(
                                          [&w0](const Inputs& in) {
                                            return ops::add(w0, ops::transpose(ops::matmul(in[1], in[0])));
                                          },
                                          lin, rng));
    Inputs ain{testing::random_leaf(rng, {4, 6}), testing::random_leaf(rng, {6, 3}), testing::random_leaf(rng, {3}),
               testing::random_leaf(rng, {3, 6}), testing::random_leaf(rng, {6})};
    adapter_worst = std::max(adapter_worst, testing::gradient_error(
                                                [](const Inputs& in) {
                                                  return adapter_forward(AdapterBlock{in[1], in[2], in[3], in[4]}, in[0]);
                                                },
                                                ain, rng));
    Inputs cin{testing::random_leaf(rng, {3, 4}), testing::random_leaf(rng, {2, 2}), testing::random_leaf(rng, {2, 2}),
               testing::random_leaf(rng, {2, 1}), testing::random_leaf(rng, {1, 1}), testing::random_leaf(rng, {1, 1}),
               testing::random_leaf(rng, {1, 2})};
    compacter_worst = std::max(compacter_worst, testing::gradient_error(
                                                    [](const Inputs& in) {
                                                      CompacterBlock b;
                                                      b.down_u = {in[3], in[3]};
                                                      b.down_v = {in[4], in[4]};
                                                      b.up_u = {in[5], in[5]};
                                                      b.up_v = {in[6], in[6]};
                                                      return compacter_forward(b, std::vector<Tensor>{in[1], in[2]}, in[0]);
                                                    },
                                                    cin, rng));
  }
  CHECK(kron_worst <= 1e-4);
  CHECK(lora_worst <= 1e-6);
  CHECK(adapter_worst <= 1e-4);
  CHECK(compacter_worst <= 1e-4);
}

TEST_CASE("freeze integrity after updates") {
  ViTModel base(ViTConfig::tiny(), 19);
  Tensor images = images_for(base.config(), 4, 20);
  std::vector<std::size_t> labels{0, 3, 5, 9};
  for (const auto& s : all_strategies()) {
    CAPTURE(s.name());
    AdaptedModel m(base, s, 21);
    std::set<std::string> trainable;
    for (const auto& e : m.trainable()) trainable.insert(e.first);
    std::vector<std::vector<double>> snapshot;
    for (const auto& e : m.base().parameters()) snapshot.push_back(e.second.to_vector());
    for (int step = 0; step < 2; ++step) {
      for (const auto& e : m.trainable()) e.second.clear_grad();
      {
        Tape tape;
        TapeScope scope(tape);
        ops::backward(ops::cross_entropy(m.forward(images), labels));
      }
      for (const auto& e : m.trainable()) {
        if (!e.second.has_grad()) continue;
        auto p = e.second.mutable_values();
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= 0.1 * e.second.grad()[i];
      }
    }
    const auto& params = m.base().parameters();
    bool head_moved = false;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const bool same = params[i].second.to_vector() == snapshot[i];
      if (!trainable.count(params[i].first)) CHECK(same);
      if (params[i].first == "head.W") head_moved = !same;
    }
    CHECK(head_moved);
  }
  // The caller's base is never touched.
  ViTModel fresh(ViTConfig::tiny(), 19);
  for (std::size_t i = 0; i < base.parameters().size(); ++i)
    CHECK(bit_equal(base.parameters()[i].second.values(), fresh.parameters()[i].second.values()));
}

TEST_CASE("adapted checkpoints round trip") {
  ViTModel base(ViTConfig::tiny(), 22);
  Rng rng(23);
  Tensor images = images_for(base.config(), 2, 24);
  for (const auto& s : all_strategies()) {
    CAPTURE(s.name());
    AdaptedModel m(base, s, 25);
    for (const auto& [path, t] : m.injected()) fill_random(t, rng, 0.2);
    AdaptedModel back = AdaptedModel::from_checkpoint(m.to_checkpoint());
    CHECK(back.strategy().to_json() == s.to_json());
    CHECK(bit_equal(back.forward(images).values(), m.forward(images).values()));
    AdaptedModel copy = m.clone();
    CHECK(bit_equal(copy.forward(images).values(), m.forward(images).values()));
    if (!m.injected().empty()) CHECK_FALSE(copy.injected()[0].second.same_storage(m.injected()[0].second));
  }
  Checkpoint bad = AdaptedModel(base, AdaptStrategy::lora(2), 0).to_checkpoint();
  bad.tensors.pop_back();
  CHECK_THROWS_AS(AdaptedModel::from_checkpoint(bad), std::runtime_error);
}
