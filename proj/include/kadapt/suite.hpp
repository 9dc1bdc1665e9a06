// SPDX-License-Identifier: Apache-2.0
//
// Surrogate pretraining and the strategy x dataset x seed benchmark.
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "kadapt/analysis.hpp"
#include "kadapt/data.hpp"
#include "kadapt/train.hpp"

namespace kadapt {

// Pretext task used to give the frozen base useful features: same motif
// dictionary as the downstream task, independent class layouts.
struct PretrainSpec {
  bool enabled = true;
  SynthSpec data = default_data();
  std::size_t epochs = 10;
  double lr = 1e-2;
  std::size_t batch_size = 20;
  std::uint64_t seed = 1;

  static SynthSpec default_data();
  nlohmann::json to_json() const;
};

// Base model with `cfg`'s architecture: encoder pretrained on the pretext
// task (when enabled), then a freshly initialized head for cfg.num_classes.
ViTModel build_surrogate(const ViTConfig& cfg, const PretrainSpec& spec);

// The downstream task used by default: 10 classes whose templates share a
// background layout and differ in 4 grid cells.
SynthSpec default_task();

enum class Protocol { few_shot, full_shot };
const char* to_string(Protocol p);
Protocol protocol_from_string(const std::string& name);

struct NamedSplits {
  std::string name;
  Splits splits;
};

struct SuiteConfig {
  std::vector<AdaptStrategy> strategies;
  Protocol protocol = Protocol::few_shot;
  FewShotSpec few_shot;
  TrainConfig train;
  // Full-shot epoch candidates before division by epoch_divisor.
  std::vector<std::size_t> full_shot_epochs{100, 200, 400};
  std::size_t epoch_divisor = 10;
  double m0 = kDefaultM0;
  // Run (strategy, seed) cells on OpenMP threads. Results do not depend on it.
  bool parallel = true;
  // Timed forward passes for the inference column.
  std::size_t timing_repeats = 3;
  // Keep each seed's selected model in SeedRun::model.
  bool keep_models = false;

  TrainConfig train_for_protocol() const;
  nlohmann::json to_json() const;
};

struct SeedRun {
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  double lr = 0.0, wd = 0.0;
  std::size_t epochs = 0;
  std::size_t failed_cells = 0;
  double seconds = 0.0;
  double inference_ms = 0.0;  // per image
  std::int64_t peak_bytes = 0;
  std::shared_ptr<const AdaptedModel> model;  // set when SuiteConfig::keep_models
};

struct RunReport {
  std::string strategy;
  std::string dataset;
  std::vector<SeedRun> seeds;
  bool failed = false;  // some seed failed
  double mean_accuracy = 0.0;  // over non-failed seeds
  CountBreakdown params;
  double pe = 0.0;
  double seconds = 0.0;
  double inference_ms = 0.0;
  std::int64_t peak_bytes = 0;

  nlohmann::json to_json(bool with_timing = true) const;
};

struct SuiteResult {
  std::vector<RunReport> reports;  // strategy-major, dataset order
  std::vector<std::string> datasets;
  std::vector<std::string> strategies;

  const RunReport& find(const std::string& strategy, const std::string& dataset) const;
  // One row per strategy: accuracy per dataset, mean, parameter counts, PE.
  std::string results_csv() const;
  // One row per (strategy, dataset, seed).
  std::string runs_csv() const;
  // Wall-clock, inference time and peak tensor memory; not deterministic.
  std::string timing_csv() const;
  nlohmann::json to_json(bool with_timing = true) const;
};

SuiteResult run_suite(const ViTModel& base, const std::vector<NamedSplits>& datasets, const SuiteConfig& cfg);

// Every strategy with its default settings, at desk scale: bottleneck 16,
// KAdaptation n = 4, r = 1.
std::vector<AdaptStrategy> default_strategies();

}  // namespace kadapt
