// SPDX-License-Identifier: Apache-2.0
#include "kadapt/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace kadapt {
namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local std::shared_ptr<MemoryTracker> g_tracker;

constexpr std::size_t kNoNode = static_cast<std::size_t>(-1);

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// --- memory accounting -----------------------------------------------------

void MemoryTracker::allocate(std::size_t bytes) {
  const auto now = live_.fetch_add(static_cast<std::int64_t>(bytes)) +
                   static_cast<std::int64_t>(bytes);
  auto peak = peak_.load();
  while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
  }
}

void MemoryTracker::release(std::size_t bytes) {
  live_.fetch_sub(static_cast<std::int64_t>(bytes));
}

MemoryScope::MemoryScope()
    : tracker_(std::make_shared<MemoryTracker>()), previous_(g_tracker) {
  g_tracker = tracker_;
}

MemoryScope::~MemoryScope() { g_tracker = previous_; }

// --- TensorImpl --------------------------------------------------------------

namespace detail {

TensorImpl::TensorImpl(Shape s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)), tracker(g_tracker) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " elements, got " +
                     std::to_string(data.size()));
  }
  for (auto dim : shape) {
    if (dim == 0) throw ShapeError("tensor dims must be positive: " + shape_str(shape));
  }
  if (tracker) tracker->allocate(data.size() * sizeof(double));
}

TensorImpl::~TensorImpl() {
  if (tracker) tracker->release((data.size() + grad.size()) * sizeof(double));
}

std::span<double> TensorImpl::grad_buffer() {
  if (grad.empty()) {
    grad.assign(data.size(), 0.0);
    if (tracker) tracker->allocate(grad.size() * sizeof(double));
  }
  return grad;
}

bool needs_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

bool needs_record(std::span<const Tensor> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

void record(const Tensor& output, std::vector<Tensor> inputs,
            Tape::BackwardFn backward) {
  g_active_tape->record(output, std::move(inputs), std::move(backward));
}

}  // namespace detail

// --- Tensor ------------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) {
  const auto n = shape_numel(shape);
  impl_ = std::make_shared<detail::TensorImpl>(std::move(shape),
                                               std::vector<double>(n, fill));
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : impl_(std::make_shared<detail::TensorImpl>(std::move(shape),
                                                 std::move(values))) {}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::values() const { return impl_->data; }

std::span<double> Tensor::mutable_values() const { return impl_->data; }

std::vector<double> Tensor::to_vector() const { return impl_->data; }

double Tensor::item() const {
  if (impl_->data.size() != 1) {
    throw ShapeError("item() on non-scalar tensor " + shape_str(impl_->shape));
  }
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() const {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::clear_grad() const {
  if (impl_->tracker) impl_->tracker->release(impl_->grad.size() * sizeof(double));
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

Tensor Tensor::clone() const {
  Tensor out(impl_->shape, impl_->data);
  out.impl_->requires_grad = impl_->requires_grad;
  return out;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

// --- Tape --------------------------------------------------------------------

Tape::~Tape() { clear(); }

void Tape::record(const Tensor& output, std::vector<Tensor> inputs,
                  BackwardFn backward) {
  auto& impl = *output.impl();
  impl.requires_grad = true;
  impl.tape = this;
  impl.node = nodes_.size();
  nodes_.push_back(Node{std::move(inputs), output, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  const auto& impl = *loss.impl();
  if (impl.tape != this || impl.node == kNoNode) {
    throw std::logic_error("backward(): loss was not produced on this tape");
  }
  auto seed = loss.impl()->grad_buffer();
  seed[0] = 1.0;
  last_visits_ = 0;
  for (std::size_t i = impl.node + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.output.impl()->grad.empty()) continue;
    node.backward(node.output.impl()->grad);
    ++last_visits_;
  }
}

void Tape::clear() {
  for (auto& node : nodes_) {
    node.output.impl()->tape = nullptr;
    node.output.impl()->node = kNoNode;
  }
  nodes_.clear();
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }

NoGradScope::~NoGradScope() { g_active_tape = previous_; }

}  // namespace kadapt
