// SPDX-License-Identifier: Apache-2.0
//
// Minibatch training, evaluation and the (lr, wd, epochs) grid search.
#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kadapt/data.hpp"
#include "kadapt/optim.hpp"
#include "kadapt/peft.hpp"

namespace kadapt {

// Anything with trainable tensors and a differentiable classifier forward.
class Learner {
 public:
  virtual ~Learner() = default;
  virtual std::vector<Tensor> parameters() const = 0;
  // images [b, c, h, w] -> logits [b, classes]
  virtual Tensor logits(const Tensor& images) const = 0;
  // Independent copy with the current parameter values.
  virtual std::unique_ptr<Learner> clone() const = 0;
};

class AdaptedLearner : public Learner {
 public:
  explicit AdaptedLearner(AdaptedModel model) : model_(std::move(model)) {}
  std::vector<Tensor> parameters() const override;
  Tensor logits(const Tensor& images) const override { return model_.forward(images); }
  std::unique_ptr<Learner> clone() const override;
  const AdaptedModel& model() const { return model_; }

 private:
  AdaptedModel model_;
};

struct TrainConfig {
  OptimizerConfig optimizer;
  std::vector<double> lr_grid{1e-3, 1e-2, 1e-1};
  std::vector<double> wd_grid{0.0, 1e-4};
  // Candidate training lengths; one run per (lr, wd) is evaluated at each.
  std::vector<std::size_t> epochs{50};
  std::size_t batch_size = 10;
  // Validation curve period in epochs; 0 records none.
  std::size_t eval_every = 0;
  std::size_t eval_batch = 100;
  // A batch loss above this, or non-finite, marks the run diverged. The
  // log-softmax loss saturates instead of overflowing, so a finite bound is
  // needed to catch runaway learning rates.
  double max_loss = 1e4;
  std::uint64_t seed = 0;
  // Run grid cells on OpenMP threads. Results do not depend on it.
  bool parallel = true;

  void validate() const;
  std::size_t max_epochs() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Fraction of rows whose argmax logit (lowest index on ties) equals the label.
double evaluate(const Learner& learner, const Dataset& data, std::size_t batch = 100);

struct CellResult {
  double lr = 0.0;
  double wd = 0.0;
  std::size_t epochs = 0;
  bool failed = false;
  double train_loss = 0.0;  // mean loss over the final epoch
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<std::pair<std::size_t, double>> val_curve;
  std::int64_t peak_bytes = 0;
  double seconds = 0.0;
  nlohmann::json to_json() const;
};

struct RunOutcome {
  std::vector<CellResult> points;  // one per entry of cfg.epochs
  std::vector<std::vector<double>> snapshots;  // parameter values, per point; empty when failed
};

// One training run at (lr, wd) for cfg.max_epochs() epochs on a copy of
// `init`, evaluated at each entry of cfg.epochs. Batch order depends only on
// cfg.seed. A diverged loss or a non-finite gradient marks the remaining
// points failed.
RunOutcome train_run(const Learner& init, const Dataset& train, const Dataset& val, const Dataset* test,
                     const TrainConfig& cfg, double lr, double wd);

struct GridResult {
  std::vector<CellResult> cells;  // lr-major, then wd, then epochs, in cfg order
  std::size_t best = 0;
  std::size_t failed_cells = 0;
  std::unique_ptr<Learner> best_learner;
  const CellResult& best_cell() const { return cells.at(best); }
  nlohmann::json to_json() const;
};

// Best validation accuracy wins; ties go to the lower lr, then the lower wd,
// then fewer epochs. Throws std::runtime_error when every cell failed.
GridResult grid_search_train(const Learner& init, const Dataset& train, const Dataset& val, const Dataset* test,
                             const TrainConfig& cfg);

// Index of the selected cell under the rule above; nullopt if all failed.
std::optional<std::size_t> select_best(const std::vector<CellResult>& cells);

}  // namespace kadapt
