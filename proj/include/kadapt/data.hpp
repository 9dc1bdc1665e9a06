// SPDX-License-Identifier: Apache-2.0
//
// Image classification datasets: IDX files, the synthetic motif task, splits
// and few-shot sampling.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "kadapt/tensor.hpp"

namespace kadapt {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  Tensor images;                    // [n, c, h, w]
  std::vector<std::size_t> labels;  // n entries in [0, classes)
  std::vector<std::size_t> ids;     // stable example identifiers
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  // Rows at `rows` (positions, not ids), in that order.
  Dataset subset(const std::vector<std::size_t>& rows) const;
  // Images for rows [start, start + count).
  Tensor batch_images(std::size_t start, std::size_t count) const;
  Tensor gather_images(const std::vector<std::size_t>& rows) const;
  // Examples per class.
  std::vector<std::size_t> class_counts() const;
};

struct Splits {
  Dataset train, val, test;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Big-endian IDX pair: uint8 images [count, rows, cols] and uint8 labels
// [count]. Pixels are scaled to [0, 1]; the result has one channel. Throws
// DataError on bad magic, count mismatch, truncated payload or missing files.
// `classes` is 1 + the largest label.
Dataset load_idx(const std::string& image_path, const std::string& label_path);
// Writes `images` (values clamped to [0, 1], rounded to uint8) and labels.
void write_idx(const std::string& image_path, const std::string& label_path, const Dataset& data);

// Shuffled per-class split by fractions (val, test); the rest is train.
Splits split_dataset(const Dataset& data, double val_fraction, double test_fraction, std::uint64_t seed);

// Shift and scale every pixel: (x - mean) / std.
void normalize(Dataset& data, double mean, double stddev);

// Synthetic classification task. Each class template places motifs from a
// shared dictionary on the patch grid; an image is its class template plus
// N(0, noise_sigma^2) pixel noise. Different `layout_seed`s give different
// tasks over the same motif dictionary (`motif_seed`).
struct SynthSpec {
  std::size_t classes = 10;
  std::size_t train_per_class = 20;
  std::size_t val_per_class = 10;
  std::size_t test_per_class = 30;
  std::size_t image_size = 16;
  std::size_t patch = 4;
  std::size_t channels = 1;
  std::size_t motifs = 8;
  // 0: every grid cell of a class template is drawn independently. k > 0:
  // templates share one background layout and differ in k cells per class.
  std::size_t distinct_cells = 0;
  double amplitude = 1.0;
  double noise_sigma = 1.0;
  std::uint64_t motif_seed = 7;
  std::uint64_t layout_seed = 11;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthSpec from_json(const nlohmann::json& j);
};

// Class templates [classes, channels, size, size].
Tensor synth_templates(const SynthSpec& spec);
Splits synth_dataset(const SynthSpec& spec);

struct FewShotSpec {
  std::size_t shots = 5;
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

// Exactly `shots` examples per class from `train`, chosen by a seeded shuffle
// of each class pool. Throws DataError when a class has fewer examples.
Dataset few_shot_sample(const Dataset& train, std::size_t shots, std::uint64_t seed);

}  // namespace kadapt
