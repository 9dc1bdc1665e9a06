// SPDX-License-Identifier: Apache-2.0
#include "kadapt/suite.hpp"

#include <chrono>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "kadapt/ops.hpp"

namespace kadapt {

namespace {

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string general(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

double inference_ms_per_image(const AdaptedModel& model, const Dataset& data, std::size_t repeats) {
  const std::size_t n = std::min<std::size_t>(data.size(), 100);
  if (n == 0 || repeats == 0) return 0.0;
  const Tensor images = data.batch_images(0, n);
  NoGradScope no_grad;
  double best = 0.0;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)model.forward(images);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (r == 0 || ms < best) best = ms;
  }
  return best / static_cast<double>(n);
}

}  // namespace

SynthSpec PretrainSpec::default_data() {
  SynthSpec s;
  s.classes = 20;
  s.train_per_class = 40;
  s.val_per_class = 5;
  s.test_per_class = 1;
  s.layout_seed = 1234;
  s.seed = 99;
  return s;
}

nlohmann::json PretrainSpec::to_json() const {
  return {{"enabled", enabled}, {"data", data.to_json()}, {"epochs", epochs},
          {"lr", lr},           {"batch_size", batch_size}, {"seed", seed}};
}

SynthSpec default_task() {
  SynthSpec s;
  s.distinct_cells = 4;
  return s;
}

ViTModel build_surrogate(const ViTConfig& cfg, const PretrainSpec& spec) {
  ViTModel out(cfg, spec.seed);
  if (!spec.enabled) return out;
  ViTConfig pre_cfg = cfg;
  pre_cfg.num_classes = spec.data.classes;
  if (spec.data.image_size != cfg.image_size || spec.data.channels != cfg.channels) {
    throw std::invalid_argument("pretext images must match the model input size");
  }
  const Splits pretext = synth_dataset(spec.data);
  TrainConfig tc;
  tc.lr_grid = {spec.lr};
  tc.wd_grid = {0.0};
  tc.epochs = {spec.epochs};
  tc.batch_size = spec.batch_size;
  tc.seed = spec.seed;
  tc.parallel = false;
  AdaptedLearner learner(AdaptedModel(ViTModel(pre_cfg, spec.seed), AdaptStrategy::full_finetune(), spec.seed));
  const RunOutcome run = train_run(learner, pretext.train, pretext.val, nullptr, tc, spec.lr, 0.0);
  if (run.points.front().failed) throw std::runtime_error("surrogate pretraining diverged");
  // Parameter order of a full-finetune learner is the registry order.
  ViTModel trained(pre_cfg, spec.seed);
  const auto& snap = run.snapshots.front();
  std::size_t offset = 0;
  for (const auto& [path, t] : trained.parameters()) {
    auto v = t.mutable_values();
    std::copy_n(snap.begin() + static_cast<std::ptrdiff_t>(offset), v.size(), v.begin());
    offset += v.size();
  }
  for (const auto& [path, t] : trained.parameters()) {
    if (path.rfind("head.", 0) != 0) out.set(path, t.clone());
  }
  return out;
}

const char* to_string(Protocol p) { return p == Protocol::few_shot ? "few_shot" : "full_shot"; }

Protocol protocol_from_string(const std::string& name) {
  if (name == "few_shot" || name == "few-shot") return Protocol::few_shot;
  if (name == "full_shot" || name == "full-shot") return Protocol::full_shot;
  throw std::invalid_argument("unknown protocol '" + name + "'");
}

TrainConfig SuiteConfig::train_for_protocol() const {
  TrainConfig t = train;
  if (protocol == Protocol::full_shot) {
    if (epoch_divisor == 0) throw std::invalid_argument("epoch_divisor must be positive");
    t.epochs.clear();
    for (auto e : full_shot_epochs) t.epochs.push_back(std::max<std::size_t>(1, e / epoch_divisor));
  }
  return t;
}

nlohmann::json SuiteConfig::to_json() const {
  nlohmann::json names = nlohmann::json::array();
  for (const auto& s : strategies) names.push_back(s.to_json());
  return {{"strategies", names},
          {"protocol", to_string(protocol)},
          {"shots", few_shot.shots},
          {"seeds", few_shot.seeds},
          {"train", train_for_protocol().to_json()},
          {"m0", m0}};
}

std::vector<AdaptStrategy> default_strategies() {
  return {AdaptStrategy::full_finetune(),  AdaptStrategy::linear_probe(),  AdaptStrategy::transformer_probe(),
          AdaptStrategy::bitfit(),         AdaptStrategy::layernorm_tune(), AdaptStrategy::attention_tune(),
          AdaptStrategy::adapter(16),      AdaptStrategy::adapter_drop(16), AdaptStrategy::lora(4),
          AdaptStrategy::compacter(4, 16), AdaptStrategy::kadaptation(4, 1), AdaptStrategy::lepe_tune(),
          AdaptStrategy::rpb_tune()};
}

nlohmann::json RunReport::to_json(bool with_timing) const {
  nlohmann::json seeds_j = nlohmann::json::array();
  for (const auto& s : seeds) {
    nlohmann::json j = {{"seed", s.seed},
                        {"failed", s.failed},
                        {"val_accuracy", s.val_accuracy},
                        {"test_accuracy", s.test_accuracy},
                        {"lr", s.lr},
                        {"wd", s.wd},
                        {"epochs", s.epochs},
                        {"failed_cells", s.failed_cells},
                        {"peak_bytes", s.peak_bytes}};
    if (s.failed) j["error"] = s.error;
    if (with_timing) {
      j["seconds"] = s.seconds;
      j["inference_ms"] = s.inference_ms;
    }
    seeds_j.push_back(j);
  }
  nlohmann::json j = {{"strategy", strategy},
                      {"dataset", dataset},
                      {"failed", failed},
                      {"seeds", seeds_j},
                      {"mean_accuracy", mean_accuracy},
                      {"params_head", params.head},
                      {"params_non_head", params.non_head},
                      {"params_total", params.total()},
                      {"pe", pe},
                      {"peak_bytes", peak_bytes}};
  if (with_timing) {
    j["seconds"] = seconds;
    j["inference_ms"] = inference_ms;
  }
  return j;
}

const RunReport& SuiteResult::find(const std::string& strategy, const std::string& dataset) const {
  for (const auto& r : reports) {
    if (r.strategy == strategy && r.dataset == dataset) return r;
  }
  throw std::out_of_range("no report for " + strategy + " on " + dataset);
}

std::string SuiteResult::results_csv() const {
  std::ostringstream os;
  os << "strategy";
  for (const auto& d : datasets) os << ',' << d << "_acc";
  os << ",mean_acc,params_head,params_non_head,params_total,pe\n";
  for (const auto& s : strategies) {
    os << s;
    double sum = 0.0;
    bool any_failed = false;
    const RunReport* first = nullptr;
    for (const auto& d : datasets) {
      const auto& r = find(s, d);
      if (!first) first = &r;
      if (r.failed) {
        os << ",FAILED";
        any_failed = true;
      } else {
        os << ',' << fixed(100.0 * r.mean_accuracy, 2);
      }
      sum += r.mean_accuracy;
    }
    const double mean = sum / static_cast<double>(datasets.size());
    os << ',' << (any_failed ? "FAILED" : fixed(100.0 * mean, 2));
    os << ',' << first->params.head << ',' << first->params.non_head << ',' << first->params.total();
    os << ',' << (any_failed ? "FAILED" : fixed(first->pe, 4)) << '\n';
  }
  return os.str();
}

std::string SuiteResult::runs_csv() const {
  std::ostringstream os;
  os << "strategy,dataset,seed,status,val_acc,test_acc,lr,wd,epochs,failed_cells,peak_bytes\n";
  for (const auto& r : reports) {
    for (const auto& s : r.seeds) {
      os << r.strategy << ',' << r.dataset << ',' << s.seed << ',' << (s.failed ? "failed" : "ok") << ','
         << fixed(100.0 * s.val_accuracy, 2) << ',' << fixed(100.0 * s.test_accuracy, 2) << ',' << general(s.lr)
         << ',' << general(s.wd) << ',' << s.epochs << ',' << s.failed_cells << ',' << s.peak_bytes << '\n';
    }
  }
  return os.str();
}

std::string SuiteResult::timing_csv() const {
  std::ostringstream os;
  os << "strategy,dataset,train_seconds,inference_ms_per_image,peak_bytes\n";
  for (const auto& r : reports) {
    os << r.strategy << ',' << r.dataset << ',' << fixed(r.seconds, 3) << ',' << fixed(r.inference_ms, 4) << ','
       << r.peak_bytes << '\n';
  }
  return os.str();
}

nlohmann::json SuiteResult::to_json(bool with_timing) const {
  nlohmann::json j;
  j["datasets"] = datasets;
  j["strategies"] = strategies;
  j["reports"] = nlohmann::json::array();
  for (const auto& r : reports) j["reports"].push_back(r.to_json(with_timing));
  return j;
}

SuiteResult run_suite(const ViTModel& base, const std::vector<NamedSplits>& datasets, const SuiteConfig& cfg) {
  if (cfg.strategies.empty() || datasets.empty()) throw std::invalid_argument("suite needs strategies and datasets");
  if (cfg.few_shot.seeds.empty()) throw std::invalid_argument("suite needs at least one seed");
  const TrainConfig train_cfg = cfg.train_for_protocol();
  train_cfg.validate();
  for (const auto& s : cfg.strategies) s.validate(base.config());

  struct Cell {
    std::size_t strategy, dataset, seed;
  };
  std::vector<Cell> cells;
  for (std::size_t s = 0; s < cfg.strategies.size(); ++s) {
    for (std::size_t d = 0; d < datasets.size(); ++d) {
      for (std::size_t k = 0; k < cfg.few_shot.seeds.size(); ++k) cells.push_back({s, d, k});
    }
  }
  std::vector<SeedRun> runs(cells.size());
  std::vector<CountBreakdown> counts(cfg.strategies.size());
  for (std::size_t s = 0; s < cfg.strategies.size(); ++s) {
    counts[s] = enumerate_count(AdaptedModel(base, cfg.strategies[s], 0));
  }

#pragma omp parallel for schedule(dynamic) if (cfg.parallel)
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Cell& c = cells[i];
    const std::uint64_t seed = cfg.few_shot.seeds[c.seed];
    const Splits& splits = datasets[c.dataset].splits;
    SeedRun& run = runs[i];
    run.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const Dataset train =
          cfg.protocol == Protocol::few_shot ? few_shot_sample(splits.train, cfg.few_shot.shots, seed) : splits.train;
      TrainConfig tc = train_cfg;
      tc.seed = seed;
      tc.parallel = false;
      AdaptedLearner init(AdaptedModel(base, cfg.strategies[c.strategy], seed));
      const GridResult grid = grid_search_train(init, train, splits.val, &splits.test, tc);
      const CellResult& best = grid.best_cell();
      run.val_accuracy = best.val_accuracy;
      run.test_accuracy = best.test_accuracy;
      run.lr = best.lr;
      run.wd = best.wd;
      run.epochs = best.epochs;
      run.failed_cells = grid.failed_cells;
      for (const auto& cell : grid.cells) run.peak_bytes = std::max(run.peak_bytes, cell.peak_bytes);
      const auto& trained = dynamic_cast<const AdaptedLearner&>(*grid.best_learner).model();
      run.inference_ms = inference_ms_per_image(trained, splits.test, cfg.timing_repeats);
      if (cfg.keep_models) run.model = std::make_shared<const AdaptedModel>(trained.clone());
    } catch (const std::exception& e) {
      run.failed = true;
      run.error = e.what();
    }
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  SuiteResult result;
  for (const auto& d : datasets) result.datasets.push_back(d.name);
  for (const auto& s : cfg.strategies) result.strategies.push_back(s.name());
  std::size_t i = 0;
  for (std::size_t s = 0; s < cfg.strategies.size(); ++s) {
    for (std::size_t d = 0; d < datasets.size(); ++d) {
      RunReport r;
      r.strategy = result.strategies[s];
      r.dataset = datasets[d].name;
      r.params = counts[s];
      std::size_t ok = 0;
      double inference = 0.0;
      for (std::size_t k = 0; k < cfg.few_shot.seeds.size(); ++k, ++i) {
        const SeedRun& run = runs[i];
        r.seeds.push_back(run);
        r.seconds += run.seconds;
        r.peak_bytes = std::max(r.peak_bytes, run.peak_bytes);
        if (run.failed) {
          r.failed = true;
          continue;
        }
        ++ok;
        r.mean_accuracy += run.test_accuracy;
        inference += run.inference_ms;
      }
      if (ok > 0) {
        r.mean_accuracy /= static_cast<double>(ok);
        r.inference_ms = inference / static_cast<double>(ok);
      }
      r.pe = pe_metric(r.mean_accuracy, r.params.total(), cfg.m0).pe;
      result.reports.push_back(std::move(r));
    }
  }
  return result;
}

}  // namespace kadapt
