// SPDX-License-Identifier: Apache-2.0
#include "kadapt/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "kadapt/random.hpp"

namespace kadapt {

namespace {

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex;
  os.width(8);
  os.fill('0');
  os << v;
  return os.str();
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& bytes, std::size_t at, const std::string& path) {
  if (bytes.size() < at + 4) throw DataError("truncated IDX header in '" + path + "'");
  return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
         (std::uint32_t{bytes[at + 2]} << 8) | std::uint32_t{bytes[at + 3]};
}

void put32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                              static_cast<char>(v)};
  out.write(b.data(), 4);
}

void check_magic(std::uint32_t found, std::uint32_t expected, const std::string& path) {
  if (found != expected) {
    throw DataError("bad IDX magic in '" + path + "': expected " + hex32(expected) + ", found " + hex32(found));
  }
}

}  // namespace

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  Dataset out;
  out.classes = classes;
  out.images = gather_images(rows);
  for (std::size_t r : rows) {
    out.labels.push_back(labels.at(r));
    out.ids.push_back(ids.at(r));
  }
  return out;
}

Tensor Dataset::gather_images(const std::vector<std::size_t>& rows) const {
  Shape shape = images.shape();
  const std::size_t per = images.numel() / shape[0];
  shape[0] = rows.size();
  std::vector<double> values(rows.size() * per);
  auto src = images.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw std::out_of_range("dataset row out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * per), per,
                values.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor(shape, std::move(values));
}

Tensor Dataset::batch_images(std::size_t start, std::size_t count) const {
  std::vector<std::size_t> rows(count);
  for (std::size_t i = 0; i < count; ++i) rows[i] = start + i;
  return gather_images(rows);
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t y : labels) ++counts.at(y);
  return counts;
}

Dataset load_idx(const std::string& image_path, const std::string& label_path) {
  const auto img = read_file(image_path);
  const auto lab = read_file(label_path);
  check_magic(be32(img, 0, image_path), kIdxImageMagic, image_path);
  check_magic(be32(lab, 0, label_path), kIdxLabelMagic, label_path);
  const std::uint32_t count = be32(img, 4, image_path);
  const std::uint32_t rows = be32(img, 8, image_path);
  const std::uint32_t cols = be32(img, 12, image_path);
  const std::uint32_t label_count = be32(lab, 4, label_path);
  if (count != label_count) {
    throw DataError("IDX count mismatch: " + std::to_string(count) + " images in '" + image_path + "', " +
                    std::to_string(label_count) + " labels in '" + label_path + "'");
  }
  const std::size_t pixels = std::size_t{count} * rows * cols;
  if (img.size() < 16 + pixels) {
    throw DataError("truncated IDX payload in '" + image_path + "': expected " + std::to_string(pixels) +
                    " bytes, found " + std::to_string(img.size() - 16));
  }
  if (lab.size() < 8 + std::size_t{count}) {
    throw DataError("truncated IDX payload in '" + label_path + "': expected " + std::to_string(count) +
                    " bytes, found " + std::to_string(lab.size() - 8));
  }
  Dataset out;
  std::vector<double> values(pixels);
  for (std::size_t i = 0; i < pixels; ++i) values[i] = img[16 + i] / 255.0;
  out.images = Tensor(Shape{count, 1, rows, cols}, std::move(values));
  for (std::size_t i = 0; i < count; ++i) {
    out.labels.push_back(lab[8 + i]);
    out.ids.push_back(i);
    out.classes = std::max<std::size_t>(out.classes, std::size_t{lab[8 + i]} + 1);
  }
  return out;
}

void write_idx(const std::string& image_path, const std::string& label_path, const Dataset& data) {
  const auto& s = data.images.shape();
  if (s.size() != 4 || s[1] != 1) throw DataError("write_idx needs single-channel [n, 1, h, w] images");
  std::ofstream img(image_path, std::ios::binary);
  std::ofstream lab(label_path, std::ios::binary);
  if (!img || !lab) throw DataError("cannot write IDX files");
  put32(img, kIdxImageMagic);
  put32(img, static_cast<std::uint32_t>(s[0]));
  put32(img, static_cast<std::uint32_t>(s[2]));
  put32(img, static_cast<std::uint32_t>(s[3]));
  for (double v : data.images.values()) {
    img.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  put32(lab, kIdxLabelMagic);
  put32(lab, static_cast<std::uint32_t>(data.size()));
  for (std::size_t y : data.labels) {
    if (y > 255) throw DataError("IDX labels must fit in one byte");
    lab.put(static_cast<char>(static_cast<unsigned char>(y)));
  }
}

Splits split_dataset(const Dataset& data, double val_fraction, double test_fraction, std::uint64_t seed) {
  if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1.0) {
    throw std::invalid_argument("split fractions must be non-negative and sum below 1");
  }
  std::vector<std::vector<std::size_t>> pools(data.classes);
  for (std::size_t i = 0; i < data.size(); ++i) pools[data.labels[i]].push_back(i);
  std::vector<std::size_t> train, val, test;
  for (std::size_t c = 0; c < pools.size(); ++c) {
    Rng rng(seed, c);
    auto order = rng.permutation(pools[c].size());
    const auto n = pools[c].size();
    const auto n_val = static_cast<std::size_t>(std::floor(n * val_fraction));
    const auto n_test = static_cast<std::size_t>(std::floor(n * test_fraction));
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t row = pools[c][order[j]];
      (j < n_val ? val : j < n_val + n_test ? test : train).push_back(row);
    }
  }
  for (auto* v : {&train, &val, &test}) std::sort(v->begin(), v->end());
  return {data.subset(train), data.subset(val), data.subset(test)};
}

void normalize(Dataset& data, double mean, double stddev) {
  if (!(stddev > 0)) throw std::invalid_argument("normalize: stddev must be positive");
  Tensor out = data.images.clone();
  for (double& v : out.mutable_values()) v = (v - mean) / stddev;
  data.images = out;
}

void SynthSpec::validate() const {
  if (classes < 2) throw std::invalid_argument("synthetic task needs at least 2 classes");
  if (patch == 0 || image_size % patch != 0) throw std::invalid_argument("patch must divide image_size");
  if (motifs == 0 || channels == 0) throw std::invalid_argument("motifs and channels must be positive");
  if (train_per_class == 0 || test_per_class == 0) throw std::invalid_argument("empty split");
  if (distinct_cells > (image_size / patch) * (image_size / patch)) {
    throw std::invalid_argument("distinct_cells exceeds the number of grid cells");
  }
  if (!(noise_sigma >= 0)) throw std::invalid_argument("noise_sigma must be non-negative");
}

nlohmann::json SynthSpec::to_json() const {
  return {{"classes", classes},       {"train_per_class", train_per_class}, {"val_per_class", val_per_class},
          {"test_per_class", test_per_class}, {"image_size", image_size}, {"patch", patch},
          {"channels", channels},     {"motifs", motifs},                   {"distinct_cells", distinct_cells}, {"amplitude", amplitude},
          {"noise_sigma", noise_sigma}, {"motif_seed", motif_seed},         {"layout_seed", layout_seed},
          {"seed", seed}};
}

SynthSpec SynthSpec::from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.classes = j.value("classes", s.classes);
  s.train_per_class = j.value("train_per_class", s.train_per_class);
  s.val_per_class = j.value("val_per_class", s.val_per_class);
  s.test_per_class = j.value("test_per_class", s.test_per_class);
  s.image_size = j.value("image_size", s.image_size);
  s.patch = j.value("patch", s.patch);
  s.channels = j.value("channels", s.channels);
  s.motifs = j.value("motifs", s.motifs);
  s.distinct_cells = j.value("distinct_cells", s.distinct_cells);
  s.amplitude = j.value("amplitude", s.amplitude);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.motif_seed = j.value("motif_seed", s.motif_seed);
  s.layout_seed = j.value("layout_seed", s.layout_seed);
  s.seed = j.value("seed", s.seed);
  return s;
}

Tensor synth_templates(const SynthSpec& spec) {
  spec.validate();
  const std::size_t p = spec.patch, side = spec.image_size, g = side / p, ch = spec.channels;
  Rng motif_rng(spec.motif_seed);
  std::vector<double> motifs(spec.motifs * ch * p * p);
  for (double& m : motifs) m = motif_rng.uniform(0, 1) < 0.5 ? -spec.amplitude : spec.amplitude;

  Tensor out(Shape{spec.classes, ch, side, side});
  auto v = out.mutable_values();
  std::vector<std::size_t> background(g * g);
  Rng shared(spec.layout_seed, 0xb6);
  for (auto& m : background) m = shared.index(spec.motifs);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    Rng layout(spec.layout_seed, c);
    std::vector<std::size_t> cells(g * g);
    if (spec.distinct_cells == 0) {
      for (auto& m : cells) m = layout.index(spec.motifs);
    } else {
      cells = background;
      const auto order = layout.permutation(g * g);
      for (std::size_t j = 0; j < spec.distinct_cells; ++j) cells[order[j]] = layout.index(spec.motifs);
    }
    for (std::size_t cell = 0; cell < g * g; ++cell) {
      const std::size_t m = cells[cell];
      const std::size_t gr = cell / g, gc = cell % g;
      for (std::size_t k = 0; k < ch; ++k) {
        for (std::size_t i = 0; i < p; ++i) {
          for (std::size_t j = 0; j < p; ++j) {
            v[((c * ch + k) * side + gr * p + i) * side + gc * p + j] = motifs[((m * ch + k) * p + i) * p + j];
          }
        }
      }
    }
  }
  return out;
}

Splits synth_dataset(const SynthSpec& spec) {
  const Tensor templates = synth_templates(spec);
  const std::size_t per = templates.numel() / spec.classes;
  auto tv = templates.values();
  std::size_t next_id = 0;
  auto make = [&](std::size_t per_class, std::uint64_t stream) {
    Dataset d;
    d.classes = spec.classes;
    const std::size_t n = per_class * spec.classes;
    std::vector<double> values(n * per);
    Rng rng(spec.seed, stream);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = i % spec.classes;
      for (std::size_t k = 0; k < per; ++k) values[i * per + k] = tv[c * per + k] + spec.noise_sigma * rng.normal();
      d.labels.push_back(c);
      d.ids.push_back(next_id++);
    }
    d.images = Tensor(Shape{n, spec.channels, spec.image_size, spec.image_size}, std::move(values));
    return d;
  };
  Splits s;
  s.train = make(spec.train_per_class, 1);
  s.val = make(spec.val_per_class, 2);
  s.test = make(spec.test_per_class, 3);
  return s;
}

Dataset few_shot_sample(const Dataset& train, std::size_t shots, std::uint64_t seed) {
  if (shots == 0) throw std::invalid_argument("few_shot_sample: shots must be positive");
  std::vector<std::vector<std::size_t>> pools(train.classes);
  for (std::size_t i = 0; i < train.size(); ++i) pools[train.labels[i]].push_back(i);
  std::vector<std::size_t> rows;
  for (std::size_t c = 0; c < pools.size(); ++c) {
    if (pools[c].size() < shots) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(pools[c].size()) +
                      " examples, fewer than " + std::to_string(shots) + " shots");
    }
    Rng rng(seed, 0xf500 + c);
    auto order = rng.permutation(pools[c].size());
    for (std::size_t j = 0; j < shots; ++j) rows.push_back(pools[c][order[j]]);
  }
  std::sort(rows.begin(), rows.end());
  return train.subset(rows);
}

}  // namespace kadapt
