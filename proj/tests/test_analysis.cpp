// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "kadapt/analysis.hpp"

using namespace kadapt;

TEST_CASE("formula_count literal substitutions") {
  CountInputs lora;
  lora.L = 12;
  lora.d_model = 768;
  lora.r = 4;
  CHECK(formula_count(CountMethod::lora, lora) == 73728);

  CountInputs compacter;
  compacter.L = 12;
  compacter.k = 768;
  compacter.d = 64;
  compacter.n = 4;
  CHECK(formula_count(CountMethod::compacter, compacter) == 10048);

  CountInputs kad;
  kad.L = 12;
  kad.d_model = 768;
  kad.r = 8;
  kad.n = 4;
  CHECK(formula_count(CountMethod::kadaptation, kad) == 4720);

  CountInputs adapter;
  adapter.L = 12;
  adapter.k = 768;
  adapter.d = 64;
  CHECK(formula_count(CountMethod::adapter, adapter) == 4ull * 12 * 768 * 64);
}

TEST_CASE("formula_count rational arithmetic") {
  CountInputs in;
  in.L = 4;
  in.d_model = 64;
  in.r = 1;
  in.n = 4;
  // 2*4*(16 + 1/4) + 64: the quarter resolves against the factor 8.
  CHECK(formula_count(CountMethod::kadaptation, in) == 194);
  in.L = 1;
  CHECK_THROWS_AS(formula_count(CountMethod::kadaptation, in), std::invalid_argument);
  in.n = 0;
  CHECK_THROWS_AS(formula_count(CountMethod::kadaptation, in), std::invalid_argument);
  CHECK_THROWS_AS(count_method_from_string("prefix"), std::invalid_argument);
}

TEST_CASE("pe_metric reproduces reported values") {
  CHECK(std::abs(pe_metric(0.6549, 87878739).pe - 0.498) <= 0.001);
  CHECK(std::abs(pe_metric(0.6632, 29523).pe - 0.663) <= 0.001);
  CHECK(std::abs(pe_metric(0.6892, 79699).pe - 0.689) <= 0.001);
}

TEST_CASE("pe_metric properties") {
  CHECK(pe_metric(0.7, 0).pe == 0.7);
  double previous = 1.0;
  for (std::uint64_t params : {0ull, 10ull, 1000ull, 100000ull, 10000000ull, 1000000000ull}) {
    const double pe = pe_metric(0.8, params).pe;
    CHECK(pe <= 0.8);
    CHECK(pe >= 0.0);
    if (params > 0) CHECK(pe < previous);
    previous = pe;
  }
  const double unit = pe_metric(1.0, 12345).pe;
  for (double s : {0.0, 0.25, 0.5, 0.9}) CHECK(pe_metric(s, 12345).pe == doctest::Approx(s * unit).epsilon(1e-15));
  CHECK_THROWS_AS(pe_metric(1.5, 10), std::invalid_argument);
  CHECK_THROWS_AS(pe_metric(-0.1, 10), std::invalid_argument);
  CHECK_THROWS_AS(pe_metric(0.5, 10, 0.0), std::invalid_argument);
}

TEST_CASE("enumerate_count") {
  ViTModel base(ViTConfig::tiny(), 1);
  SUBCASE("linear probe") {
    auto c = enumerate_count(AdaptedModel(base, AdaptStrategy::linear_probe(), 0));
    CHECK(c.non_head == 0);
    CHECK(c.head == 650);
  }
  SUBCASE("full finetune is complete") {
    auto c = enumerate_count(AdaptedModel(base, AdaptStrategy::full_finetune(), 0));
    CHECK(c.total() == base.parameter_count());
  }
  SUBCASE("kadaptation n=4 r=1 on attention q and v") {
    auto c = enumerate_count(AdaptedModel(base, AdaptStrategy::kadaptation(4, 1), 0));
    CHECK(c.non_head == 64 + 4 * 2 * 1 * (64 + 64));
    CHECK(c.non_head == 1088);
  }
  SUBCASE("order invariance and breakdown sum") {
    AdaptedModel m(base, AdaptStrategy::compacter(4, 8), 0);
    NamedTensors shuffled = m.trainable();
    std::reverse(shuffled.begin(), shuffled.end());
    auto a = enumerate_count(m.trainable());
    auto b = enumerate_count(shuffled);
    CHECK(a.head == b.head);
    CHECK(a.non_head == b.non_head);
    std::uint64_t sum = 0;
    for (std::size_t i = 0; i < a.per_path.size(); ++i) {
      CHECK(a.per_path[i].path == b.per_path[i].path);
      sum += a.per_path[i].count;
    }
    CHECK(sum == a.total());
  }
}

TEST_CASE("reconcile") {
  ViTModel base(ViTConfig::tiny(), 2);
  SUBCASE("lora on Wq and Wv has no gap") {
    auto r = reconcile(AdaptedModel(base, AdaptStrategy::lora(4), 0));
    CHECK(r.inputs.L == 8);
    CHECK(r.formula == 2 * 8 * 4 * 64);
    CHECK(r.gap == 0);
  }
  SUBCASE("adapter without biases has no gap") {
    auto s = AdaptStrategy::adapter(16);
    s.adapter_bias = false;
    auto r = reconcile(AdaptedModel(base, s, 0));
    CHECK(r.gap == 0);
    CHECK(r.enumerated == r.formula);
    auto with_bias = reconcile(AdaptedModel(base, AdaptStrategy::adapter(16), 0));
    CHECK(with_bias.gap == 0);
    CHECK(with_bias.enumerated == with_bias.formula + 4 * 2 * (16 + 64));
  }
  SUBCASE("kadaptation and compacter report a gap with a note") {
    auto k = reconcile(AdaptedModel(base, AdaptStrategy::kadaptation(4, 1), 0));
    CHECK(k.formula == 194);
    CHECK(k.enumerated == 1088);
    CHECK(k.gap == 1088 - 194);
    CHECK_FALSE(k.note.empty());
    auto c = reconcile(AdaptedModel(base, AdaptStrategy::compacter(4, 16), 0));
    CHECK(c.gap != 0);
    CHECK(c.to_json().at("note").get<std::string>().size() > 0);
  }
  SUBCASE("strategies without a formula row") {
    CHECK_THROWS_AS(reconcile(AdaptedModel(base, AdaptStrategy::bitfit(), 0)), std::invalid_argument);
  }
}
