#pragma once
// Dense f64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto shared storage. Operations that see at least
// one input with requires_grad() append a backward closure to the calling
// thread's Tape; backward(loss) replays the tape in reverse and clears it.
// Tapes are thread_local, so independent computations may run on separate
// threads while sharing read-only parameters.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace zsq {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first gradient lands here
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return !impl_->grad.empty(); }
  // Allocates a zero gradient on first access. Gradients are mutable through
  // any handle: the tape accumulates into tensors captured by value.
  std::span<double> grad() const;
  void zero_grad();

  // Copy of the values with no gradient history.
  Tensor detach() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Thread-local record of differentiable operations in execution order.
class Tape {
 public:
  static Tape& current();

  void record(std::function<void()> backward_fn);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1, runs every recorded closure in reverse, clears.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> entries_;
};

bool grad_enabled();

// Disables recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// True when recording is on and any input requires a gradient.
bool needs_grad(std::initializer_list<const Tensor*> inputs);

void backward(const Tensor& loss);

}  // namespace zsq
