// SPDX-License-Identifier: Apache-2.0
//
// Random-subspace training of one submodule, Theta = Theta0 + P theta, and
// local intrinsic dimension measurement.
#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kadapt/train.hpp"

namespace kadapt {

// In-place unnormalized Walsh-Hadamard transform; size must be a power of two.
void fwht(std::span<double> x);

// Linear map R^d -> R^D given matrix-free.
class Projection {
 public:
  virtual ~Projection() = default;
  virtual std::size_t full_dim() const = 0;
  virtual std::size_t sub_dim() const = 0;
  // out (D) = P theta (d)
  virtual void apply(std::span<const double> theta, std::span<double> out) const = 0;
  // out (d) = P^T y (D)
  virtual void apply_adjoint(std::span<const double> y, std::span<double> out) const = 0;
  virtual std::string kind() const = 0;
};

// Stacked Fastfood blocks V = S H G Pi H B of length 2^m >= d with
// normalized Hadamard factors, ceil(D / 2^m) blocks, truncated to D and
// scaled so columns have unit expected squared norm. S_i = s_i / ||G||,
// s_i ~ chi(2^m).
class FastfoodProjection : public Projection {
 public:
  FastfoodProjection(std::size_t D, std::size_t d, std::uint64_t seed);
  std::size_t full_dim() const override { return D_; }
  std::size_t sub_dim() const override { return d_; }
  void apply(std::span<const double> theta, std::span<double> out) const override;
  void apply_adjoint(std::span<const double> y, std::span<double> out) const override;
  std::string kind() const override { return "fastfood"; }
  std::size_t block_length() const { return len_; }
  std::size_t blocks() const { return blocks_.size(); }

 private:
  struct Block {
    std::vector<double> sign, gauss, scale;
    std::vector<std::size_t> perm;
  };
  std::size_t D_, d_, len_;
  double norm_;
  std::vector<Block> blocks_;
};

// Dense matrix with i.i.d. N(0, 1/D) entries. D * d must not exceed 2^24.
class DenseGaussianProjection : public Projection {
 public:
  static constexpr std::size_t kMaxEntries = std::size_t{1} << 24;
  DenseGaussianProjection(std::size_t D, std::size_t d, std::uint64_t seed);
  std::size_t full_dim() const override { return D_; }
  std::size_t sub_dim() const override { return d_; }
  void apply(std::span<const double> theta, std::span<double> out) const override;
  void apply_adjoint(std::span<const double> y, std::span<double> out) const override;
  std::string kind() const override { return "dense"; }

 private:
  std::size_t D_, d_;
  std::vector<double> m_;  // row-major [D, d]
};

enum class ProjectionKind { fastfood, dense };
const char* to_string(ProjectionKind k);
ProjectionKind projection_kind_from_string(const std::string& name);
std::shared_ptr<const Projection> make_projection(ProjectionKind kind, std::size_t D, std::size_t d,
                                                  std::uint64_t seed);

enum class Submodule { attention, mlp };
const char* to_string(Submodule m);
Submodule submodule_from_string(const std::string& name);

struct SubspaceTarget {
  Submodule module = Submodule::attention;
  std::vector<std::size_t> layers{0};
  // Registry paths covered, in registry order. Throws std::out_of_range for a
  // layer the model does not have.
  std::vector<std::string> paths(const ViTConfig& cfg) const;
  std::string name() const;
};

// Frozen model whose target submodule is reparameterized as Theta0 + P theta.
// Trainable: theta (absent when d = 0) and the classification head.
class SubspaceLearner : public Learner, public ForwardHooks {
 public:
  SubspaceLearner(const ViTModel& base, const SubspaceTarget& target, std::size_t d, ProjectionKind kind,
                  std::uint64_t seed);
  std::vector<Tensor> parameters() const override;
  Tensor logits(const Tensor& images) const override;
  std::unique_ptr<Learner> clone() const override;
  Tensor param(const std::string& path, const Tensor& base) const override;

  std::size_t full_dim() const { return theta0_.size(); }
  std::size_t sub_dim() const { return theta_.defined() ? theta_.numel() : 0; }
  const Tensor& theta() const { return theta_; }
  const Projection* projection() const { return projection_.get(); }
  // Current target parameters Theta0 + P theta, in target path order.
  NamedTensors effective_parameters() const;
  // Flattened Theta0.
  const std::vector<double>& theta0() const { return theta0_; }

 private:
  SubspaceLearner(const SubspaceLearner& other);

  ViTModel model_;
  std::vector<std::string> paths_;
  std::vector<std::size_t> offsets_;
  std::vector<double> theta0_;
  Tensor theta_;
  std::shared_ptr<const Projection> projection_;
  mutable std::vector<Tensor> current_;  // per-path effective tensors of the running forward
};

// Frozen model whose target submodule parameters and head train directly.
class SubmoduleLearner : public Learner {
 public:
  SubmoduleLearner(const ViTModel& base, const SubspaceTarget& target);
  std::vector<Tensor> parameters() const override;
  Tensor logits(const Tensor& images) const override { return model_.forward(images); }
  std::unique_ptr<Learner> clone() const override;

 private:
  ViTModel model_;
  std::vector<std::string> trainable_;
};

struct SubspaceRun {
  std::size_t d = 0;
  double accuracy = 0.0;  // validation accuracy of the selected grid cell
  double lr = 0.0, wd = 0.0;
  std::size_t epochs = 0;
};

// Trains theta and the head through the projection; grid search over cfg.
SubspaceRun subspace_train(const ViTModel& base, const SubspaceTarget& target, std::size_t d, ProjectionKind kind,
                           std::uint64_t projection_seed, const Dataset& train, const Dataset& val,
                           const TrainConfig& cfg);
// Same budget with the target submodule trained directly.
SubspaceRun direct_train(const ViTModel& base, const SubspaceTarget& target, const Dataset& train,
                         const Dataset& val, const TrainConfig& cfg);

struct IDMeasurement {
  std::string target;
  std::vector<std::size_t> grid;
  double full_accuracy = 0.0;
  double threshold = 0.9;
  std::vector<std::pair<std::size_t, double>> results;  // evaluated grid prefix
  std::optional<std::size_t> d_t;
  nlohmann::json to_json() const;
};

// Smallest d whose accuracy reaches `threshold` times `full_accuracy` on a
// fixed results table, or nullopt.
std::optional<std::size_t> threshold_crossing(const std::vector<std::pair<std::size_t, double>>& results,
                                              double full_accuracy, double threshold);

// Evaluates `accuracy(d)` over the ascending grid and stops at the first d
// reaching threshold * full_accuracy. Throws std::invalid_argument for an
// empty or non-ascending grid, full_accuracy <= 0 or threshold outside (0, 1].
IDMeasurement measure_local_id(const std::function<double(std::size_t)>& accuracy,
                               const std::vector<std::size_t>& grid, double full_accuracy, double threshold = 0.9,
                               std::string target = "");

struct LocalIDConfig {
  Submodule module = Submodule::attention;
  std::vector<std::size_t> layers{0, 1, 3};
  std::vector<std::size_t> grid{4, 8, 16, 32, 64, 128, 256};
  ProjectionKind projection = ProjectionKind::fastfood;
  double threshold = 0.9;
  std::uint64_t projection_seed = 0;
  TrainConfig train = default_train();

  static TrainConfig default_train();
  nlohmann::json to_json() const;
};

// Per-layer measurements plus the threshold crossing of the layer-mean curve.
// Full accuracy is direct training of the same submodule with the same budget.
struct LocalIDReport {
  std::string module;
  std::vector<IDMeasurement> layers;
  IDMeasurement mean_curve;
  nlohmann::json config;
  nlohmann::json to_json() const;
};

LocalIDReport measure_local_id(const ViTModel& base, const Splits& data, const LocalIDConfig& cfg);

}  // namespace kadapt
