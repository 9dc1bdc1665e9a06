// SPDX-License-Identifier: Apache-2.0
#include "kadapt/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <tuple>

#include "kadapt/ops.hpp"
#include "kadapt/random.hpp"

namespace kadapt {

std::vector<Tensor> AdaptedLearner::parameters() const {
  std::vector<Tensor> out;
  for (const auto& e : model_.trainable()) out.push_back(e.second);
  return out;
}

std::unique_ptr<Learner> AdaptedLearner::clone() const {
  return std::make_unique<AdaptedLearner>(model_.clone());
}

void TrainConfig::validate() const {
  if (lr_grid.empty() || wd_grid.empty() || epochs.empty()) throw std::invalid_argument("empty training grid");
  for (auto e : epochs) {
    if (e == 0) throw std::invalid_argument("epochs must be positive");
  }
  for (double lr : lr_grid) {
    if (!(lr > 0)) throw std::invalid_argument("learning rates must be positive");
  }
  for (double wd : wd_grid) {
    if (!(wd >= 0)) throw std::invalid_argument("weight decay must be non-negative");
  }
  if (!(max_loss > 0)) throw std::invalid_argument("max_loss must be positive");
  if (batch_size == 0 || eval_batch == 0) throw std::invalid_argument("batch sizes must be positive");
}

std::size_t TrainConfig::max_epochs() const { return *std::max_element(epochs.begin(), epochs.end()); }

nlohmann::json TrainConfig::to_json() const {
  return {{"optimizer", optimizer.to_json()}, {"lr_grid", lr_grid},     {"wd_grid", wd_grid},
          {"epochs", epochs},                 {"batch_size", batch_size}, {"eval_every", eval_every},
          {"eval_batch", eval_batch},         {"max_loss", max_loss},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("optimizer")) c.optimizer = OptimizerConfig::from_json(j.at("optimizer"));
  c.lr_grid = j.value("lr_grid", c.lr_grid);
  c.wd_grid = j.value("wd_grid", c.wd_grid);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.eval_batch = j.value("eval_batch", c.eval_batch);
  c.max_loss = j.value("max_loss", c.max_loss);
  c.seed = j.value("seed", c.seed);
  return c;
}

double evaluate(const Learner& learner, const Dataset& data, std::size_t batch) {
  if (data.size() == 0) return 0.0;
  NoGradScope no_grad;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t n = std::min(batch, data.size() - start);
    const Tensor logits = learner.logits(data.batch_images(start, n));
    const std::size_t classes = logits.dim(1);
    auto v = logits.values();
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = v.subspan(i * classes, classes);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == data.labels[start + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

nlohmann::json CellResult::to_json() const {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [e, a] : val_curve) curve.push_back({e, a});
  return {{"lr", lr},
          {"wd", wd},
          {"epochs", epochs},
          {"failed", failed},
          {"train_loss", failed ? nlohmann::json() : nlohmann::json(train_loss)},
          {"val_accuracy", val_accuracy},
          {"test_accuracy", test_accuracy},
          {"val_curve", curve},
          {"peak_bytes", peak_bytes}};
}

RunOutcome train_run(const Learner& init, const Dataset& train, const Dataset& val, const Dataset* test,
                     const TrainConfig& cfg, double lr, double wd) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RunOutcome out;
  std::vector<std::size_t> stops = cfg.epochs;
  std::sort(stops.begin(), stops.end());
  out.points.resize(cfg.epochs.size());
  out.snapshots.resize(cfg.epochs.size());

  MemoryScope memory;
  std::unique_ptr<Learner> learner = init.clone();
  const std::vector<Tensor> params = learner->parameters();
  for (const auto& p : params) Tensor(p).set_requires_grad(true);
  Optimizer opt(cfg.optimizer, params);
  Rng order_rng(cfg.seed, 0xba7c);

  bool failed = false;
  double epoch_loss = 0.0;
  std::vector<std::pair<std::size_t, double>> curve;
  const std::size_t n = train.size();
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs() && !failed; ++epoch) {
    const auto order = order_rng.permutation(n);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n && !failed; start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, n - start);
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(start + count));
      std::vector<std::size_t> labels;
      for (auto r : rows) labels.push_back(train.labels[r]);
      for (const auto& p : params) p.clear_grad();
      {
        Tape tape;
        TapeScope scope(tape);
        const Tensor loss = ops::cross_entropy(learner->logits(train.gather_images(rows)), labels);
        const double value = loss.item();
        if (!std::isfinite(value) || value > cfg.max_loss) {
          failed = true;
          break;
        }
        loss_sum += value * static_cast<double>(count);
        ops::backward(loss);
      }
      if (!opt.step(lr, wd)) failed = true;
    }
    if (failed) break;
    epoch_loss = loss_sum / static_cast<double>(n);
    const bool is_stop = std::binary_search(stops.begin(), stops.end(), epoch);
    const bool on_curve = cfg.eval_every > 0 && epoch % cfg.eval_every == 0;
    if (!is_stop && !on_curve) continue;
    const double val_acc = evaluate(*learner, val, cfg.eval_batch);
    if (on_curve) curve.emplace_back(epoch, val_acc);
    if (!is_stop) continue;
    const double test_acc = test ? evaluate(*learner, *test, cfg.eval_batch) : 0.0;
    std::vector<double> snap;
    for (const auto& p : params) {
      auto v = p.values();
      snap.insert(snap.end(), v.begin(), v.end());
    }
    for (std::size_t i = 0; i < cfg.epochs.size(); ++i) {
      if (cfg.epochs[i] != epoch) continue;
      out.points[i].train_loss = epoch_loss;
      out.points[i].val_accuracy = val_acc;
      out.points[i].test_accuracy = test_acc;
      out.snapshots[i] = snap;
    }
  }
  for (const auto& p : params) p.clear_grad();
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (std::size_t i = 0; i < cfg.epochs.size(); ++i) {
    auto& pt = out.points[i];
    pt.lr = lr;
    pt.wd = wd;
    pt.epochs = cfg.epochs[i];
    pt.failed = out.snapshots[i].empty();
    if (pt.failed) pt.val_accuracy = pt.test_accuracy = 0.0;
    pt.val_curve = curve;
    pt.peak_bytes = memory.tracker().peak_bytes();
    pt.seconds = seconds;
  }
  return out;
}

std::optional<std::size_t> select_best(const std::vector<CellResult>& cells) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    if (c.failed) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = cells[*best];
    const bool better = c.val_accuracy != b.val_accuracy
                            ? c.val_accuracy > b.val_accuracy
                            : std::tie(c.lr, c.wd, c.epochs) < std::tie(b.lr, b.wd, b.epochs);
    if (better) best = i;
  }
  return best;
}

GridResult grid_search_train(const Learner& init, const Dataset& train, const Dataset& val, const Dataset* test,
                             const TrainConfig& cfg) {
  cfg.validate();
  const std::size_t nw = cfg.wd_grid.size();
  const std::size_t runs = cfg.lr_grid.size() * nw;
  std::vector<RunOutcome> outcomes(runs);
  std::vector<std::unique_ptr<Learner>> starts(runs);
  for (std::size_t r = 0; r < runs; ++r) starts[r] = init.clone();
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic) if (cfg.parallel)
  for (std::size_t r = 0; r < runs; ++r) {
    try {
      outcomes[r] = train_run(*starts[r], train, val, test, cfg, cfg.lr_grid[r / nw], cfg.wd_grid[r % nw]);
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);

  GridResult result;
  std::vector<const std::vector<double>*> snaps;
  for (auto& o : outcomes) {
    for (std::size_t i = 0; i < o.points.size(); ++i) {
      result.cells.push_back(o.points[i]);
      snaps.push_back(&o.snapshots[i]);
      if (o.points[i].failed) ++result.failed_cells;
    }
  }
  const auto best = select_best(result.cells);
  if (!best) throw std::runtime_error("grid search: every cell diverged");
  result.best = *best;
  result.best_learner = init.clone();
  std::size_t offset = 0;
  const auto& snap = *snaps[*best];
  for (const auto& p : result.best_learner->parameters()) {
    auto v = p.mutable_values();
    std::copy_n(snap.begin() + static_cast<std::ptrdiff_t>(offset), v.size(), v.begin());
    offset += v.size();
  }
  return result;
}

nlohmann::json GridResult::to_json() const {
  nlohmann::json j;
  j["cells"] = nlohmann::json::array();
  for (const auto& c : cells) j["cells"].push_back(c.to_json());
  j["best"] = best;
  j["failed_cells"] = failed_cells;
  return j;
}

}  // namespace kadapt
