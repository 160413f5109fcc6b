#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace qgate {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor handle with optional gradient buffer.
///
/// Copies of a handle alias the same storage, which is what the autograd
/// tape relies on. Use clone() for an independent copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, bool requires_grad = false);
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static BasicTensor scalar(T value);
  static BasicTensor full(Shape shape, T value);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  // Handles share storage, so constness of the handle does not extend to the values.
  std::span<T> data() const;
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on) const;

  bool has_grad() const;
  // Allocates a zero-filled gradient buffer on first access.
  std::span<T> grad() const;
  void zero_grad() const;
  void clear_grad() const;

  BasicTensor clone() const;
  bool same_storage(const BasicTensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    // Fixed alignment keeps Eigen's vectorized reductions on the same code path run to run.
    std::vector<T, Eigen::aligned_allocator<T>> data;
    std::vector<T, Eigen::aligned_allocator<T>> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

/// Packed variable-length sequences stored back to back along axis 0.
struct SequenceLayout {
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;

  SequenceLayout() = default;
  explicit SequenceLayout(std::vector<std::size_t> segment_lengths);
  static SequenceLayout single(std::size_t length) { return SequenceLayout({length}); }

  std::size_t size() const noexcept { return lengths.size(); }
};

/// Ordered record of executed differentiable ops.
///
/// Each op appends a closure that accumulates its input gradients from its
/// output gradient; backward() replays them in exact reverse order.
class Tape {
 public:
  void record(std::function<void()> backward_fn);

  template <typename T>
  void backward(const BasicTensor<T>& root);

  std::size_t size() const noexcept { return entries_.size(); }
  void clear() noexcept { entries_.clear(); }

 private:
  void replay();
  std::vector<std::function<void()>> entries_;
};

/// Installs a tape as the recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for the current thread (teacher evaluation, inference).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

template <typename T>
void Tape::backward(const BasicTensor<T>& root) {
  if (root.numel() != 1) {
    throw std::invalid_argument("backward() root must be a scalar");
  }
  root.grad()[0] = T(1);
  replay();
}

}  // namespace qgate
