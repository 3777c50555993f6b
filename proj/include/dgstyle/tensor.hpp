#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dgstyle {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible shapes, extents or channel counts.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside an operation's mathematical domain (log of 0, division by 0, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf observed in a forward value or an adjoint.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major real array with an optional gradient slot.
///
/// Tensor is a handle: copies share storage, so a parameter held by a model
/// and the same parameter captured by a recorded graph op are one object.
/// Values are treated as immutable once an op has consumed them; only leaf
/// parameters are updated in place (by the optimizer) through mutable_data().
/// The gradient buffer stays empty until an adjoint actually reaches the
/// tensor, which lets callers tell "zero gradient" from "not reached".
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : impl_(std::make_shared<Impl>()) { impl_->data.assign(1, T{0}); }

  Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Impl>()) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + to_string(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor full(Shape shape, T value) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), T{0}); }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() const { return impl_->data; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (size() != 1) throw ShapeError("item: tensor " + to_string(shape()) + " is not a scalar");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated as zeros on first access.
  std::span<T> grad_mut() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T{0});
    return impl_->grad;
  }
  void zero_grad() const { impl_->grad.clear(); }

  /// Value copy cut off from the graph (no gradient slot, requires_grad off).
  Tensor detach() const { return Tensor(impl_->shape, impl_->data); }

  /// Deep copy that keeps the requires_grad flag but not the gradient.
  Tensor clone() const {
    Tensor out(impl_->shape, impl_->data);
    out.impl_->requires_grad = impl_->requires_grad;
    return out;
  }

  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }

  bool all_finite() const {
    for (const T v : impl_->data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Element-wise cast between precisions; the result is a fresh leaf.
template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  std::vector<To> out(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(out));
}

}  // namespace dgstyle
