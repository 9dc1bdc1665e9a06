// SPDX-License-Identifier: Apache-2.0
#include "kadapt/subspace.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

#include "kadapt/ops.hpp"
#include "kadapt/random.hpp"

namespace kadapt {

void fwht(std::span<double> x) {
  const std::size_t n = x.size();
  if (n == 0 || (n & (n - 1)) != 0) throw std::invalid_argument("fwht: length must be a power of two");
  for (std::size_t h = 1; h < n; h <<= 1) {
    for (std::size_t i = 0; i < n; i += h << 1) {
      for (std::size_t j = i; j < i + h; ++j) {
        const double a = x[j], b = x[j + h];
        x[j] = a + b;
        x[j + h] = a - b;
      }
    }
  }
}

FastfoodProjection::FastfoodProjection(std::size_t D, std::size_t d, std::uint64_t seed) : D_(D), d_(d), len_(1) {
  if (D == 0 || d == 0) throw std::invalid_argument("fastfood: D and d must be positive");
  while (len_ < d) len_ <<= 1;
  norm_ = 1.0 / std::sqrt(static_cast<double>(len_) * static_cast<double>(D));
  const std::size_t count = (D + len_ - 1) / len_;
  for (std::size_t b = 0; b < count; ++b) {
    Rng rng(seed, b);
    Block blk;
    blk.sign.resize(len_);
    for (double& s : blk.sign) s = rng.uniform(0, 1) < 0.5 ? -1.0 : 1.0;
    blk.perm = rng.permutation(len_);
    blk.gauss.resize(len_);
    double g2 = 0.0;
    for (double& g : blk.gauss) {
      g = rng.normal();
      g2 += g * g;
    }
    std::chi_squared_distribution<double> chi2(static_cast<double>(len_));
    blk.scale.resize(len_);
    for (double& s : blk.scale) s = std::sqrt(chi2(rng.engine()) / g2);
    blocks_.push_back(std::move(blk));
  }
}

void FastfoodProjection::apply(std::span<const double> theta, std::span<double> out) const {
  if (theta.size() != d_ || out.size() != D_) throw ShapeError("fastfood apply: size mismatch");
  std::vector<double> buf(len_), tmp(len_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const Block& blk = blocks_[b];
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t i = 0; i < d_; ++i) buf[i] = theta[i] * blk.sign[i];
    fwht(buf);
    for (std::size_t i = 0; i < len_; ++i) tmp[i] = buf[blk.perm[i]] * blk.gauss[i];
    fwht(tmp);
    for (std::size_t i = 0; i < len_ && b * len_ + i < D_; ++i) out[b * len_ + i] = tmp[i] * blk.scale[i] * norm_;
  }
}

void FastfoodProjection::apply_adjoint(std::span<const double> y, std::span<double> out) const {
  if (y.size() != D_ || out.size() != d_) throw ShapeError("fastfood adjoint: size mismatch");
  std::fill(out.begin(), out.end(), 0.0);
  std::vector<double> buf(len_), tmp(len_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const Block& blk = blocks_[b];
    for (std::size_t i = 0; i < len_; ++i) {
      tmp[i] = b * len_ + i < D_ ? y[b * len_ + i] * blk.scale[i] * norm_ : 0.0;
    }
    fwht(tmp);
    for (std::size_t i = 0; i < len_; ++i) buf[blk.perm[i]] = tmp[i] * blk.gauss[i];
    fwht(buf);
    for (std::size_t i = 0; i < d_; ++i) out[i] += buf[i] * blk.sign[i];
  }
}

DenseGaussianProjection::DenseGaussianProjection(std::size_t D, std::size_t d, std::uint64_t seed) : D_(D), d_(d) {
  if (D == 0 || d == 0) throw std::invalid_argument("dense projection: D and d must be positive");
  if (D > kMaxEntries / d) {
    throw std::invalid_argument("dense projection: D * d = " + std::to_string(D) + " * " + std::to_string(d) +
                                " exceeds 2^24 entries");
  }
  Rng rng(seed, 0xde45e);
  m_.resize(D * d);
  const double sd = 1.0 / std::sqrt(static_cast<double>(D));
  for (double& v : m_) v = rng.normal(0.0, sd);
}

void DenseGaussianProjection::apply(std::span<const double> theta, std::span<double> out) const {
  if (theta.size() != d_ || out.size() != D_) throw ShapeError("dense apply: size mismatch");
  for (std::size_t i = 0; i < D_; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d_; ++j) acc += m_[i * d_ + j] * theta[j];
    out[i] = acc;
  }
}

void DenseGaussianProjection::apply_adjoint(std::span<const double> y, std::span<double> out) const {
  if (y.size() != D_ || out.size() != d_) throw ShapeError("dense adjoint: size mismatch");
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < D_; ++i) {
    for (std::size_t j = 0; j < d_; ++j) out[j] += m_[i * d_ + j] * y[i];
  }
}

const char* to_string(ProjectionKind k) { return k == ProjectionKind::fastfood ? "fastfood" : "dense"; }

ProjectionKind projection_kind_from_string(const std::string& name) {
  if (name == "fastfood") return ProjectionKind::fastfood;
  if (name == "dense") return ProjectionKind::dense;
  throw std::invalid_argument("unknown projection '" + name + "'");
}

std::shared_ptr<const Projection> make_projection(ProjectionKind kind, std::size_t D, std::size_t d,
                                                  std::uint64_t seed) {
  if (kind == ProjectionKind::fastfood) return std::make_shared<FastfoodProjection>(D, d, seed);
  return std::make_shared<DenseGaussianProjection>(D, d, seed);
}

const char* to_string(Submodule m) { return m == Submodule::attention ? "attention" : "mlp"; }

Submodule submodule_from_string(const std::string& name) {
  if (name == "attention" || name == "attn") return Submodule::attention;
  if (name == "mlp") return Submodule::mlp;
  throw std::invalid_argument("unknown submodule '" + name + "'");
}

std::vector<std::string> SubspaceTarget::paths(const ViTConfig& cfg) const {
  if (layers.empty()) throw std::invalid_argument("subspace target needs at least one layer");
  std::vector<std::string> out;
  for (std::size_t l : layers) {
    if (l >= cfg.num_layers) throw std::out_of_range("layer " + std::to_string(l) + " does not exist");
    const std::string p = "block." + std::to_string(l) + ".";
    if (module == Submodule::attention) {
      for (const char* proj : {"q", "k", "v", "o"}) {
        out.push_back(p + "attn.W" + proj);
        out.push_back(p + "attn.b" + proj);
      }
    } else {
      for (const char* name : {"mlp.W1", "mlp.b1", "mlp.W2", "mlp.b2"}) out.push_back(p + name);
    }
  }
  return out;
}

std::string SubspaceTarget::name() const {
  std::string s = to_string(module);
  s += "@";
  for (std::size_t i = 0; i < layers.size(); ++i) s += (i ? "+" : "") + std::to_string(layers[i]);
  return s;
}

SubspaceLearner::SubspaceLearner(const ViTModel& base, const SubspaceTarget& target, std::size_t d,
                                 ProjectionKind kind, std::uint64_t seed)
    : model_(base.clone()), paths_(target.paths(base.config())) {
  for (const auto& path : paths_) {
    offsets_.push_back(theta0_.size());
    auto v = model_.at(path).values();
    theta0_.insert(theta0_.end(), v.begin(), v.end());
  }
  if (d > 0) {
    projection_ = make_projection(kind, theta0_.size(), d, seed);
    theta_ = Tensor(Shape{d});
    theta_.set_requires_grad(true);
  }
  Tensor(model_.at("head.W")).set_requires_grad(true);
  Tensor(model_.at("head.b")).set_requires_grad(true);
}

SubspaceLearner::SubspaceLearner(const SubspaceLearner& other)
    : Learner(),
      ForwardHooks(),
      model_(other.model_.clone()),
      paths_(other.paths_),
      offsets_(other.offsets_),
      theta0_(other.theta0_),
      projection_(other.projection_) {
  if (other.theta_.defined()) {
    theta_ = other.theta_.clone();
    theta_.set_requires_grad(true);
  }
  Tensor(model_.at("head.W")).set_requires_grad(true);
  Tensor(model_.at("head.b")).set_requires_grad(true);
}

std::vector<Tensor> SubspaceLearner::parameters() const {
  std::vector<Tensor> out;
  if (theta_.defined()) out.push_back(theta_);
  out.push_back(model_.at("head.W"));
  out.push_back(model_.at("head.b"));
  return out;
}

std::unique_ptr<Learner> SubspaceLearner::clone() const {
  return std::unique_ptr<Learner>(new SubspaceLearner(*this));
}

Tensor SubspaceLearner::param(const std::string& path, const Tensor& base) const {
  if (current_.empty()) return base;
  const auto it = std::find(paths_.begin(), paths_.end(), path);
  return it == paths_.end() ? base : current_[static_cast<std::size_t>(it - paths_.begin())];
}

Tensor SubspaceLearner::logits(const Tensor& images) const {
  if (!theta_.defined()) return model_.forward(images);
  const Projection* p = projection_.get();
  const Tensor delta = ops::linear_map(
      theta_, p->full_dim(), [p](std::span<const double> x, std::span<double> y) { p->apply(x, y); },
      [p](std::span<const double> y, std::span<double> x) { p->apply_adjoint(y, x); });
  current_.clear();
  for (std::size_t i = 0; i < paths_.size(); ++i) {
    const Tensor& base = model_.at(paths_[i]);
    const Tensor piece = ops::reshape(ops::slice(delta, 0, offsets_[i], base.numel()), base.shape());
    current_.push_back(ops::add(base, piece));
  }
  Tensor out;
  try {
    out = model_.forward(images, {}, this);
  } catch (...) {
    current_.clear();
    throw;
  }
  current_.clear();
  return out;
}

NamedTensors SubspaceLearner::effective_parameters() const {
  std::vector<double> delta(theta0_.size(), 0.0);
  if (theta_.defined()) projection_->apply(theta_.values(), delta);
  NamedTensors out;
  for (std::size_t i = 0; i < paths_.size(); ++i) {
    const Tensor& base = model_.at(paths_[i]);
    std::vector<double> v(base.numel());
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = theta0_[offsets_[i] + k] + delta[offsets_[i] + k];
    out.emplace_back(paths_[i], Tensor(base.shape(), std::move(v)));
  }
  return out;
}

SubmoduleLearner::SubmoduleLearner(const ViTModel& base, const SubspaceTarget& target)
    : model_(base.clone()), trainable_(target.paths(base.config())) {
  trainable_.push_back("head.W");
  trainable_.push_back("head.b");
  for (const auto& path : trainable_) Tensor(model_.at(path)).set_requires_grad(true);
}

std::vector<Tensor> SubmoduleLearner::parameters() const {
  std::vector<Tensor> out;
  for (const auto& path : trainable_) out.push_back(model_.at(path));
  return out;
}

std::unique_ptr<Learner> SubmoduleLearner::clone() const {
  auto copy = std::make_unique<SubmoduleLearner>(*this);
  copy->model_ = model_.clone();
  for (const auto& path : trainable_) Tensor(copy->model_.at(path)).set_requires_grad(true);
  return copy;
}

namespace {

SubspaceRun run_from(const GridResult& g, std::size_t d) {
  SubspaceRun r;
  r.d = d;
  r.accuracy = g.best_cell().val_accuracy;
  r.lr = g.best_cell().lr;
  r.wd = g.best_cell().wd;
  r.epochs = g.best_cell().epochs;
  return r;
}

}  // namespace

SubspaceRun subspace_train(const ViTModel& base, const SubspaceTarget& target, std::size_t d, ProjectionKind kind,
                           std::uint64_t projection_seed, const Dataset& train, const Dataset& val,
                           const TrainConfig& cfg) {
  const SubspaceLearner init(base, target, d, kind, projection_seed);
  return run_from(grid_search_train(init, train, val, nullptr, cfg), d);
}

SubspaceRun direct_train(const ViTModel& base, const SubspaceTarget& target, const Dataset& train,
                         const Dataset& val, const TrainConfig& cfg) {
  const SubmoduleLearner init(base, target);
  SubspaceRun r = run_from(grid_search_train(init, train, val, nullptr, cfg), 0);
  for (const auto& path : target.paths(base.config())) r.d += base.at(path).numel();
  return r;
}

std::optional<std::size_t> threshold_crossing(const std::vector<std::pair<std::size_t, double>>& results,
                                              double full_accuracy, double threshold) {
  for (const auto& [d, acc] : results) {
    if (acc >= threshold * full_accuracy) return d;
  }
  return std::nullopt;
}

IDMeasurement measure_local_id(const std::function<double(std::size_t)>& accuracy,
                               const std::vector<std::size_t>& grid, double full_accuracy, double threshold,
                               std::string target) {
  if (grid.empty()) throw std::invalid_argument("measure_local_id: empty grid");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (grid[i] <= grid[i - 1]) throw std::invalid_argument("measure_local_id: grid must be strictly ascending");
  }
  if (!(full_accuracy > 0)) throw std::invalid_argument("measure_local_id: full accuracy must be positive");
  if (!(threshold > 0 && threshold <= 1)) throw std::invalid_argument("measure_local_id: threshold must be in (0, 1]");
  IDMeasurement m;
  m.target = std::move(target);
  m.grid = grid;
  m.full_accuracy = full_accuracy;
  m.threshold = threshold;
  for (std::size_t d : grid) {
    const double acc = accuracy(d);
    m.results.emplace_back(d, acc);
    if (acc >= threshold * full_accuracy) {
      m.d_t = d;
      break;
    }
  }
  return m;
}

nlohmann::json IDMeasurement::to_json() const {
  nlohmann::json res = nlohmann::json::array();
  for (const auto& [d, acc] : results) res.push_back({{"d", d}, {"accuracy", acc}});
  return {{"target", target},
          {"grid", grid},
          {"full_accuracy", full_accuracy},
          {"threshold", threshold},
          {"results", res},
          {"d_t", d_t ? nlohmann::json(*d_t) : nlohmann::json()}};
}

TrainConfig LocalIDConfig::default_train() {
  TrainConfig t;
  t.optimizer.kind = OptimizerKind::adamw;
  t.lr_grid = {1e-3, 1e-2};
  t.wd_grid = {1e-8};
  t.epochs = {10};
  t.batch_size = 32;
  return t;
}

nlohmann::json LocalIDConfig::to_json() const {
  return {{"module", to_string(module)},
          {"layers", layers},
          {"grid", grid},
          {"projection", to_string(projection)},
          {"threshold", threshold},
          {"projection_seed", projection_seed},
          {"train", train.to_json()},
          {"full_accuracy_reference", "direct training of the same submodule with the same budget"}};
}

nlohmann::json LocalIDReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  nlohmann::json d_ts = nlohmann::json::array();
  for (const auto& m : layers) {
    per.push_back(m.to_json());
    d_ts.push_back(m.d_t ? nlohmann::json(*m.d_t) : nlohmann::json());
  }
  return {{"module", module},
          {"config", config},
          {"layers", per},
          {"d_t_per_layer", d_ts},
          {"mean_curve", mean_curve.to_json()},
          {"d_t_mean_curve", mean_curve.d_t ? nlohmann::json(*mean_curve.d_t) : nlohmann::json()}};
}

LocalIDReport measure_local_id(const ViTModel& base, const Splits& data, const LocalIDConfig& cfg) {
  LocalIDReport report;
  report.module = to_string(cfg.module);
  report.config = cfg.to_json();
  std::map<std::pair<std::size_t, std::size_t>, double> cache;
  auto acc = [&](std::size_t layer, std::size_t d) {
    const auto key = std::make_pair(layer, d);
    const auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    const SubspaceTarget target{cfg.module, {layer}};
    const double a =
        subspace_train(base, target, d, cfg.projection, cfg.projection_seed, data.train, data.val, cfg.train).accuracy;
    cache[key] = a;
    return a;
  };
  double mean_full = 0.0;
  for (std::size_t layer : cfg.layers) {
    const SubspaceTarget target{cfg.module, {layer}};
    const double full = direct_train(base, target, data.train, data.val, cfg.train).accuracy;
    mean_full += full / static_cast<double>(cfg.layers.size());
    report.layers.push_back(measure_local_id([&](std::size_t d) { return acc(layer, d); }, cfg.grid, full,
                                             cfg.threshold, target.name()));
  }
  report.mean_curve = measure_local_id(
      [&](std::size_t d) {
        double sum = 0.0;
        for (std::size_t layer : cfg.layers) sum += acc(layer, d);
        return sum / static_cast<double>(cfg.layers.size());
      },
      cfg.grid, mean_full, cfg.threshold, std::string(to_string(cfg.module)) + "@mean");
  return report;
}

}  // namespace kadapt
