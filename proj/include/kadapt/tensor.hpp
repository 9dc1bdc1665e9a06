// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle; copies alias the same storage. Operations that
// read at least one requires_grad input while a Tape is active on the calling
// thread record a node on that tape; with no active tape they compute values
// only. Each thread has its own active tape, so independent training runs can
// proceed in parallel as long as they do not mutate shared tensors.
#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kadapt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Live/peak byte accounting for tensor storage, installed per thread with
// MemoryScope. Tensors remember the tracker active when they were created.
class MemoryTracker {
 public:
  void allocate(std::size_t bytes);
  void release(std::size_t bytes);
  std::int64_t live_bytes() const { return live_.load(); }
  std::int64_t peak_bytes() const { return peak_.load(); }

 private:
  std::atomic<std::int64_t> live_{0};
  std::atomic<std::int64_t> peak_{0};
};

class MemoryScope {
 public:
  MemoryScope();
  ~MemoryScope();
  MemoryScope(const MemoryScope&) = delete;
  MemoryScope& operator=(const MemoryScope&) = delete;

  const MemoryTracker& tracker() const { return *tracker_; }

 private:
  std::shared_ptr<MemoryTracker> tracker_;
  std::shared_ptr<MemoryTracker> previous_;
};

class Tape;

namespace detail {
struct TensorImpl;
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Writable view of the storage. Only meant for leaves (parameters, inputs);
  // writing into a recorded op output invalidates its backward rule.
  std::span<double> mutable_values() const;
  std::vector<double> to_vector() const;
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad() const;
  void clear_grad() const;

  // Deep copy of values; the copy keeps requires_grad but has no grad and no
  // tape history.
  Tensor clone() const;
  // Deep copy with requires_grad off.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend class Tape;
};

// Ordered record of differentiable operations. Nodes are appended as ops
// execute, so inputs always precede the nodes that consume them.
class Tape {
 public:
  // Receives the gradient of the node's output.
  using BackwardFn = std::function<void(std::span<const double>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  void record(const Tensor& output, std::vector<Tensor> inputs,
              BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and runs every node from the loss back to the
  // start of the tape once, in reverse order. Gradients accumulate into the
  // grad buffers of requires_grad tensors.
  void backward(const Tensor& loss);

  // Drops all nodes (and the intermediate tensors they keep alive).
  void clear();

  std::size_t size() const { return nodes_.size(); }
  std::size_t last_backward_visits() const { return last_visits_; }

  // Tape active on the calling thread, or nullptr.
  static Tape* active();

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;

  friend class TapeScope;
};

// Makes `tape` the active tape of the calling thread for the scope lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording on the calling thread (evaluation mode).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

struct TensorImpl {
  TensorImpl(Shape s, std::vector<double> d);
  ~TensorImpl();
  TensorImpl(const TensorImpl&) = delete;
  TensorImpl& operator=(const TensorImpl&) = delete;

  // Grad storage, allocated as zeros on first use.
  std::span<double> grad_buffer();

  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  Tape* tape = nullptr;
  std::size_t node = static_cast<std::size_t>(-1);
  std::shared_ptr<MemoryTracker> tracker;
};

// True when an op over these inputs must be recorded.
bool needs_record(std::initializer_list<const Tensor*> inputs);
bool needs_record(std::span<const Tensor> inputs);

// Records `output` on the active tape.
void record(const Tensor& output, std::vector<Tensor> inputs,
            Tape::BackwardFn backward);

// Gradient accumulator of an input; only call when requires_grad is set.
inline std::span<double> grad_of(const Tensor& t) {
  return t.impl()->grad_buffer();
}

}  // namespace detail

}  // namespace kadapt
