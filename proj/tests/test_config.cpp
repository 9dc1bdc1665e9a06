// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "kadapt/config.hpp"

using namespace kadapt;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "kadapt_test_config";
  fs::create_directories(dir);
  return dir / name;
}

fs::path write_file(const std::string& name, const std::string& text) {
  const fs::path p = scratch(name);
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST_CASE("every key round-trips through dump and read") {
  Settings s;
  const fs::path p = write_file("dump.ini", dump_config(s));
  Settings t;
  apply_config(t, read_config_file(p.string()));
  CHECK(dump_config(t) == dump_config(s));

  std::set<std::string> names;
  for (const auto& k : config_keys()) {
    CHECK(k.name.find('.') != std::string::npos);
    CHECK(names.insert(k.name).second);
  }
}

TEST_CASE("file values and later overrides apply in order") {
  const fs::path p = write_file("run.ini",
                                "; comment\n"
                                "[train]\n"
                                "lr_grid = 1e-3, 5e-2\n"
                                "optimizer = adamw\n"
                                "[protocol]\n"
                                "seeds = 4,5\n"
                                "[bench]\n"
                                "strategies = linear_probe; kadaptation:n=2,r=1\n"
                                "[run]\n"
                                "format = json\n");
  Settings s;
  apply_config(s, read_config_file(p.string()));
  CHECK(s.suite.train.lr_grid == std::vector<double>{1e-3, 5e-2});
  CHECK(s.suite.train.optimizer.kind == OptimizerKind::adamw);
  CHECK(s.suite.few_shot.seeds == std::vector<std::uint64_t>{4, 5});
  REQUIRE(s.suite.strategies.size() == 2);
  CHECK(s.suite.strategies[1].kind == StrategyKind::kadaptation);
  CHECK(s.suite.strategies[1].n == 2);
  CHECK(s.format == "json");

  apply_config(s, {{"train.lr_grid", "0.1"}, {"pretrain.seed", "9"}});
  CHECK(s.suite.train.lr_grid == std::vector<double>{0.1});
  CHECK(s.pretrain.seed == 9);
}

TEST_CASE("bad keys and values are rejected") {
  Settings s;
  CHECK_THROWS_AS(apply_config(s, {{"train.nope", "1"}}), std::invalid_argument);
  CHECK_THROWS_AS(apply_config(s, {{"model.d_model", "-3"}}), std::invalid_argument);
  CHECK_THROWS_AS(apply_config(s, {{"model.d_model", "12x"}}), std::invalid_argument);
  CHECK_THROWS_AS(apply_config(s, {{"bench.parallel", "maybe"}}), std::invalid_argument);
  CHECK_THROWS_AS(apply_config(s, {{"run.format", "xml"}}), std::invalid_argument);
  CHECK_THROWS_AS(apply_config(s, {{"train.wd_grid", ""}}), std::invalid_argument);

  const fs::path unknown = write_file("unknown.ini", "[model]\nwidth = 3\n");
  CHECK_THROWS_AS(read_config_file(unknown.string()), std::invalid_argument);
  const fs::path broken = write_file("broken.ini", "[model\nd_model = 3\n");
  CHECK_THROWS_AS(read_config_file(broken.string()), std::runtime_error);
}

TEST_CASE("strategy specs parse back to the same strategy") {
  auto strategies = default_strategies();
  strategies.push_back(AdaptStrategy::lora(2, true));
  strategies.push_back(AdaptStrategy::adapter(8, AdapterPlacement::inside_attention));
  auto k = AdaptStrategy::kadaptation(8, 2, KronTargets::mlp);
  k.low_rank_slow = true;
  k.slow_rank = 2;
  strategies.push_back(k);
  for (const auto& s : strategies) {
    CAPTURE(strategy_spec(s));
    CHECK(AdaptStrategy::parse(strategy_spec(s)).to_json() == s.to_json());
  }
}

TEST_CASE("pad_or_crop centers the image") {
  Tensor img({1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor padded = pad_or_crop(img, 4);
  const std::vector<double> want{0, 0, 0, 0, 0, 1, 2, 0, 0, 3, 4, 0, 0, 0, 0, 0};
  CHECK(std::vector<double>(padded.values().begin(), padded.values().end()) == want);
  const Tensor back = pad_or_crop(padded, 2);
  CHECK(std::vector<double>(back.values().begin(), back.values().end()) == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("IDX data is resized to the model input") {
  Dataset d;
  d.images = Tensor({20, 1, 8, 8}, 0.5);
  for (std::size_t i = 0; i < 20; ++i) {
    d.labels.push_back(i % 2);
    d.ids.push_back(i);
  }
  d.classes = 2;
  const fs::path img = scratch("img.idx"), lab = scratch("lab.idx");
  write_idx(img.string(), lab.string(), d);

  Settings s;
  s.data.source = "idx";
  s.data.idx_images = img.string();
  s.data.idx_labels = lab.string();
  s.data.val_fraction = 0.2;
  s.data.test_fraction = 0.2;
  const Splits splits = load_data(s);
  CHECK(splits.train.images.shape() == Shape{12, 1, 16, 16});
  CHECK(splits.train.size() + splits.val.size() + splits.test.size() == 20);

  s.model.channels = 3;
  CHECK_THROWS_AS(load_data(s), std::invalid_argument);
  s.model.channels = 1;
  s.data.source = "csv";
  CHECK_THROWS_AS(load_data(s), std::invalid_argument);
}

TEST_CASE("synthetic data follows the model input size") {
  Settings s;
  s.model.image_size = 8;
  s.data.synth.train_per_class = 2;
  s.data.synth.val_per_class = 1;
  s.data.synth.test_per_class = 1;
  const Splits splits = load_data(s);
  CHECK(splits.train.images.shape() == Shape{20, 1, 8, 8});
}

TEST_CASE("base checkpoint head must match the data") {
  Settings s;
  s.pretrain.enabled = false;
  const ViTModel base = load_base(s, 3);
  CHECK(base.config().num_classes == 3);
  const fs::path p = scratch("base.ckpt");
  save_model(p, base);
  s.base_checkpoint = p.string();
  CHECK(load_base(s, 3).config() == base.config());
  CHECK_THROWS_AS(load_base(s, 4), std::invalid_argument);
}
