// SPDX-License-Identifier: Apache-2.0
//
// Run settings loaded from an INI file ("[section]" headers, "key = value"
// lines) and overridden per key from the command line.
#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "kadapt/subspace.hpp"
#include "kadapt/suite.hpp"

namespace kadapt {

struct DataSettings {
  std::string source = "synthetic";  // synthetic | idx
  std::string name = "synthetic";
  SynthSpec synth = default_task();
  std::string idx_images, idx_labels;
  double val_fraction = 0.1;
  double test_fraction = 0.3;
  std::uint64_t split_seed = 0;
  double norm_mean = 0.0;
  double norm_std = 1.0;
};

struct Settings {
  ViTConfig model;
  // Base model checkpoint; empty builds the surrogate from `pretrain`.
  std::string base_checkpoint;
  PretrainSpec pretrain;
  DataSettings data;
  SuiteConfig suite = default_suite();
  AdaptStrategy strategy = AdaptStrategy::kadaptation(4, 1);
  LocalIDConfig id;
  std::string out_dir = "kadapt-out";
  std::string format = "csv";

  static SuiteConfig default_suite();
};

struct ConfigKey {
  std::string name;  // "section.key"
  std::string help;
  std::function<void(Settings&, const std::string&)> set;
  std::function<std::string(const Settings&)> get;
};

// Every recognized key, in file order.
const std::vector<ConfigKey>& config_keys();

// Parses an INI file into section.key -> value. Throws std::runtime_error on
// syntax errors and std::invalid_argument on unknown keys.
std::map<std::string, std::string> read_config_file(const std::string& path);

// Applies overrides in order; unknown keys and malformed values throw
// std::invalid_argument naming the key.
void apply_config(Settings& s, const std::map<std::string, std::string>& values);

// Effective settings as an INI document.
std::string dump_config(const Settings& s);

// Loads the dataset named by s.data (synthetic task or IDX files), normalized.
// Synthetic images take the model's image size and channels; IDX images are
// zero padded or center cropped to the model's image size.
Splits load_data(const Settings& s);

// Zero pad or center crop [n, c, h, w] images to size x size.
Tensor pad_or_crop(const Tensor& images, std::size_t size);

// Base model with a num_classes head: loaded from s.base_checkpoint (head
// size must match) or built from s.pretrain.
ViTModel load_base(const Settings& s, std::size_t num_classes);

// Spec string that AdaptStrategy::parse maps back to `s`.
std::string strategy_spec(const AdaptStrategy& s);

// "1e-3,1e-2" style lists.
std::vector<double> parse_doubles(const std::string& text);
std::vector<std::size_t> parse_sizes(const std::string& text);
// Strategies separated by ';' or whitespace.
std::vector<AdaptStrategy> parse_strategies(const std::string& text);

}  // namespace kadapt
