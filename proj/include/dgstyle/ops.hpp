#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "dgstyle/graph.hpp"
#include "dgstyle/tensor.hpp"

/// Differentiable operator set. Every op takes the graph it records into as
/// its first argument; with a non-recording graph the ops are plain forward
/// kernels.
namespace dgstyle::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_finite(std::string_view op, const Tensor<T>& t) {
  if (!t.all_finite()) throw NonFiniteError("forward: non-finite value produced by '" + std::string(op) + "'");
}

template <typename T>
void require_same_shape(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <typename T>
void require_rank(std::string_view op, const Tensor<T>& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(t.shape()));
  }
}

// y_i = f(x_i); dy_i/dx_i = df(x_i, y_i).
template <typename T, typename F, typename DF>
Tensor<T> unary(Graph<T>& g, std::string_view name, const Tensor<T>& a, F f, DF df) {
  std::vector<T> out(a.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  Tensor<T> y(a.shape(), std::move(out));
  require_finite(name, y);
  if (g.wants_grad({&a})) {
    g.record(name, y, [a, y, df](std::span<const T> gy) mutable {
      if (!a.requires_grad()) return;
      auto ga = a.grad_mut();
      const auto xv = a.data();
      const auto yv = y.data();
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * df(xv[i], yv[i]);
    });
  }
  return y;
}

// z_i = f(x_i, y_i) with partials (dz/dx, dz/dy) = df(x_i, y_i).
template <typename T, typename F, typename DF>
Tensor<T> binary(Graph<T>& g, std::string_view name, const Tensor<T>& a, const Tensor<T>& b, F f, DF df) {
  require_same_shape(name, a, b);
  std::vector<T> out(a.size());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  Tensor<T> z(a.shape(), std::move(out));
  require_finite(name, z);
  if (g.wants_grad({&a, &b})) {
    g.record(name, z, [a, b, df](std::span<const T> gz) mutable {
      const auto xv = a.data();
      const auto yv = b.data();
      const bool da = a.requires_grad();
      const bool db = b.requires_grad();
      auto ga = da ? a.grad_mut() : std::span<T>{};
      auto gb = db ? b.grad_mut() : std::span<T>{};
      for (std::size_t i = 0; i < gz.size(); ++i) {
        const auto [px, py] = df(xv[i], yv[i]);
        if (da) ga[i] += gz[i] * px;
        if (db) gb[i] += gz[i] * py;
      }
    });
  }
  return z;
}

template <typename T>
struct Partials {
  T dx;
  T dy;
};

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise arithmetic

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(g, "add", a, b, [](T x, T y) { return x + y; },
                        [](T, T) { return detail::Partials<T>{T{1}, T{1}}; });
}

template <typename T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(g, "sub", a, b, [](T x, T y) { return x - y; },
                        [](T, T) { return detail::Partials<T>{T{1}, T{-1}}; });
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(g, "mul", a, b, [](T x, T y) { return x * y; },
                        [](T x, T y) { return detail::Partials<T>{y, x}; });
}

template <typename T>
Tensor<T> div(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  for (const T v : b.data()) {
    if (v == T{0}) throw DomainError("div: division by zero");
  }
  return detail::binary(g, "div", a, b, [](T x, T y) { return x / y; },
                        [](T x, T y) { return detail::Partials<T>{T{1} / y, -x / (y * y)}; });
}

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, T s) {
  return detail::unary(g, "add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}

template <typename T>
Tensor<T> sub(Graph<T>& g, T s, const Tensor<T>& a) {
  return detail::unary(g, "rsub_scalar", a, [s](T x) { return s - x; }, [](T, T) { return T{-1}; });
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, T s) {
  return detail::unary(g, "mul_scalar", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> div(Graph<T>& g, const Tensor<T>& a, T s) {
  if (s == T{0}) throw DomainError("div: division by zero");
  return mul(g, a, T{1} / s);
}

template <typename T>
Tensor<T> neg(Graph<T>& g, const Tensor<T>& a) {
  return detail::unary(g, "neg", a, [](T x) { return -x; }, [](T, T) { return T{-1}; });
}

template <typename T>
Tensor<T> exp(Graph<T>& g, const Tensor<T>& a) {
  return detail::unary(g, "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(Graph<T>& g, const Tensor<T>& a) {
  for (const T v : a.data()) {
    if (!(v > T{0})) throw DomainError("log: non-positive input");
  }
  return detail::unary(g, "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <typename T>
Tensor<T> sqrt(Graph<T>& g, const Tensor<T>& a) {
  for (const T v : a.data()) {
    if (v < T{0}) throw DomainError("sqrt: negative input");
  }
  return detail::unary(g, "sqrt", a, [](T x) { return std::sqrt(x); },
                       [](T, T y) { return T{0.5} / y; });
}

/// a^p for a real exponent; negative bases need an integral exponent.
template <typename T>
Tensor<T> pow(Graph<T>& g, const Tensor<T>& a, T p) {
  if (p != std::floor(p)) {
    for (const T v : a.data()) {
      if (v < T{0}) throw DomainError("pow: negative base with fractional exponent");
    }
  }
  return detail::unary(
      g, "pow", a, [p](T x) { return std::pow(x, p); },
      [p](T x, T) { return p == T{0} ? T{0} : p * std::pow(x, p - T{1}); });
}

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& a) {
  return detail::unary(g, "relu", a, [](T x) { return x > T{0} ? x : T{0}; },
                       [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <typename T>
Tensor<T> sigmoid(Graph<T>& g, const Tensor<T>& a) {
  return detail::unary(
      g, "sigmoid", a,
      [](T x) {
        if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
        const T e = std::exp(x);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

/// Clamps into [lo, hi]; the adjoint passes through inside the closed interval.
template <typename T>
Tensor<T> clamp(Graph<T>& g, const Tensor<T>& a, T lo, T hi) {
  return detail::unary(g, "clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
                       [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T{1} : T{0}; });
}

/// Value passthrough with a zero adjoint.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  return a.detach();
}

enum class UnaryOp { neg, exp, log, sqrt, relu, sigmoid };
enum class BinaryOp { add, sub, mul, div };

template <typename T>
Tensor<T> elementwise(Graph<T>& g, UnaryOp op, const Tensor<T>& a) {
  switch (op) {
    case UnaryOp::neg: return neg(g, a);
    case UnaryOp::exp: return exp(g, a);
    case UnaryOp::log: return log(g, a);
    case UnaryOp::sqrt: return sqrt(g, a);
    case UnaryOp::relu: return relu(g, a);
    case UnaryOp::sigmoid: return sigmoid(g, a);
  }
  throw Error("elementwise: unknown unary op");
}

template <typename T>
Tensor<T> elementwise(Graph<T>& g, BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  switch (op) {
    case BinaryOp::add: return add(g, a, b);
    case BinaryOp::sub: return sub(g, a, b);
    case BinaryOp::mul: return mul(g, a, b);
    case BinaryOp::div: return div(g, a, b);
  }
  throw Error("elementwise: unknown binary op");
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tensor<T> y(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (g.wants_grad({&a})) {
    g.record("reshape", y, [a](std::span<const T> gy) mutable { accumulate_grad(a, gy); });
  }
  return y;
}

template <typename T>
Tensor<T> transpose(Graph<T>& g, const Tensor<T>& a) {
  detail::require_rank("transpose", a, 2);
  const auto m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  Tensor<T> y({n, m}, std::move(out));
  if (g.wants_grad({&a})) {
    g.record("transpose", y, [a, m, n](std::span<const T> gy) mutable {
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += gy[j * m + i];
    });
  }
  return y;
}

/// y[b] = x[index[b]] along the leading (batch) axis.
template <typename T>
Tensor<T> gather_batch(Graph<T>& g, const Tensor<T>& x, const std::vector<std::size_t>& index) {
  if (x.rank() == 0) throw ShapeError("gather_batch: scalar input");
  const auto batch = x.dim(0);
  const auto row = x.size() / std::max<std::size_t>(batch, 1);
  for (const auto i : index) {
    if (i >= batch) throw ShapeError("gather_batch: index out of range");
  }
  Shape shape = x.shape();
  shape[0] = index.size();
  std::vector<T> out(index.size() * row);
  for (std::size_t b = 0; b < index.size(); ++b)
    std::copy_n(x.data().begin() + index[b] * row, row, out.begin() + b * row);
  Tensor<T> y(std::move(shape), std::move(out));
  if (g.wants_grad({&x})) {
    g.record("gather_batch", y, [x, index, row](std::span<const T> gy) mutable {
      auto gx = x.grad_mut();
      for (std::size_t b = 0; b < index.size(); ++b)
        for (std::size_t k = 0; k < row; ++k) gx[index[b] * row + k] += gy[b * row + k];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceOp { sum, mean };

/// Reduces over `axes` (dropped from the output shape). Empty `axes` reduces
/// every axis to a scalar.
template <typename T>
Tensor<T> reduce(Graph<T>& g, ReduceOp op, const Tensor<T>& a, std::vector<std::size_t> axes = {}) {
  const auto& in_shape = a.shape();
  if (axes.empty()) {
    axes.resize(in_shape.size());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
  }
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  std::vector<bool> reduced(in_shape.size(), false);
  for (const auto ax : axes) {
    if (ax >= in_shape.size()) {
      throw ShapeError("reduce: axis " + std::to_string(ax) + " invalid for " + to_string(in_shape));
    }
    reduced[ax] = true;
  }
  Shape out_shape;
  for (std::size_t i = 0; i < in_shape.size(); ++i)
    if (!reduced[i]) out_shape.push_back(in_shape[i]);
  const auto out_strides = detail::strides_of(out_shape);

  // Output offset of every input element.
  std::vector<std::size_t> target(a.size());
  std::vector<std::size_t> idx(in_shape.size(), 0);
  for (std::size_t flat = 0; flat < a.size(); ++flat) {
    std::size_t off = 0, k = 0;
    for (std::size_t d = 0; d < in_shape.size(); ++d) {
      if (!reduced[d]) off += idx[d] * out_strides[k++];
    }
    target[flat] = off;
    for (std::size_t d = in_shape.size(); d-- > 0;) {
      if (++idx[d] < in_shape[d]) break;
      idx[d] = 0;
    }
  }
  const std::size_t count = out_shape.empty() ? a.size() : a.size() / std::max<std::size_t>(numel(out_shape), 1);
  if (op == ReduceOp::mean && count == 0) throw ShapeError("reduce: mean over an empty extent");
  const T factor = op == ReduceOp::mean ? T{1} / static_cast<T>(count) : T{1};

  std::vector<T> out(numel(out_shape), T{0});
  for (std::size_t flat = 0; flat < a.size(); ++flat) out[target[flat]] += a[flat];
  for (auto& v : out) v *= factor;
  Tensor<T> y(std::move(out_shape), std::move(out));
  detail::require_finite("reduce", y);
  if (g.wants_grad({&a})) {
    g.record(op == ReduceOp::mean ? "mean" : "sum", y,
             [a, target = std::move(target), factor](std::span<const T> gy) mutable {
               auto ga = a.grad_mut();
               for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[target[i]] * factor;
             });
  }
  return y;
}

template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& a, std::vector<std::size_t> axes = {}) {
  return reduce(g, ReduceOp::sum, a, std::move(axes));
}

template <typename T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& a, std::vector<std::size_t> axes = {}) {
  return reduce(g, ReduceOp::mean, a, std::move(axes));
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  std::vector<T> out(m * n);
  detail::MatMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatMap<T>(a.data().data(), m, k) * detail::ConstMatMap<T>(b.data().data(), k, n);
  Tensor<T> y({m, n}, std::move(out));
  detail::require_finite("matmul", y);
  if (g.wants_grad({&a, &b})) {
    g.record("matmul", y, [a, b, m, k, n](std::span<const T> gy) mutable {
      detail::ConstMatMap<T> G(gy.data(), m, n);
      if (a.requires_grad()) {
        detail::MatMap<T>(a.grad_mut().data(), m, k).noalias() +=
            G * detail::ConstMatMap<T>(b.data().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        detail::MatMap<T>(b.grad_mut().data(), k, n).noalias() +=
            detail::ConstMatMap<T>(a.data().data(), m, k).transpose() * G;
      }
    });
  }
  return y;
}

/// Per-instance Gram matrix: [B,C,H,W] -> [B,C,C], G_b = M_b M_b^T / (H W)
/// with M_b the [C, H W] view of instance b.
template <typename T>
Tensor<T> gram(Graph<T>& g, const Tensor<T>& x) {
  detail::require_rank("gram", x, 4);
  const auto B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (P == 0) throw ShapeError("gram: empty spatial extent");
  const T scale = T{1} / static_cast<T>(P);
  std::vector<T> out(B * C * C);
  for (std::size_t b = 0; b < B; ++b) {
    detail::ConstMatMap<T> M(x.data().data() + b * C * P, C, P);
    detail::MatMap<T> G(out.data() + b * C * C, C, C);
    G.noalias() = (M * M.transpose()) * scale;
    // GEMM rounding can differ across the diagonal; mirror so G is exactly symmetric.
    G.template triangularView<Eigen::StrictlyUpper>() = G.transpose();
  }
  Tensor<T> y({B, C, C}, std::move(out));
  detail::require_finite("gram", y);
  if (g.wants_grad({&x})) {
    g.record("gram", y, [x, B, C, P, scale](std::span<const T> gy) mutable {
      auto gx = x.grad_mut();
      for (std::size_t b = 0; b < B; ++b) {
        detail::ConstMatMap<T> G(gy.data() + b * C * C, C, C);
        detail::ConstMatMap<T> M(x.data().data() + b * C * P, C, P);
        detail::MatMap<T>(gx.data() + b * C * P, C, P).noalias() += ((G + G.transpose()) * M) * scale;
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolution and pooling

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t pixels() const { return out_h * out_w; }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                                   std::string_view axis) {
  const auto padded = in + 2 * pad;
  if (k > padded) {
    throw ShapeError("conv2d: kernel " + std::string(axis) + " extent exceeds padded input");
  }
  if ((padded - k) % stride != 0) {
    throw ShapeError("conv2d: non-integral output " + std::string(axis) + " extent");
  }
  return (padded - k) / stride + 1;
}

namespace detail {

template <typename T>
void im2col(const T* x, const ConvGeometry& cg, T* col) {
  const auto P = cg.pixels();
  for (std::size_t c = 0; c < cg.channels; ++c) {
    for (std::size_t ki = 0; ki < cg.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < cg.kernel_w; ++kj) {
        T* row = col + ((c * cg.kernel_h + ki) * cg.kernel_w + kj) * P;
        for (std::size_t oy = 0; oy < cg.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * cg.stride + ki) - static_cast<std::ptrdiff_t>(cg.padding);
          T* dst = row + oy * cg.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(cg.height)) {
            std::fill_n(dst, cg.out_w, T{0});
            continue;
          }
          const T* src = x + (c * cg.height + static_cast<std::size_t>(iy)) * cg.width;
          for (std::size_t ox = 0; ox < cg.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * cg.stride + kj) - static_cast<std::ptrdiff_t>(cg.padding);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(cg.width)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& cg, T* dx) {
  const auto P = cg.pixels();
  for (std::size_t c = 0; c < cg.channels; ++c) {
    for (std::size_t ki = 0; ki < cg.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < cg.kernel_w; ++kj) {
        const T* row = col + ((c * cg.kernel_h + ki) * cg.kernel_w + kj) * P;
        for (std::size_t oy = 0; oy < cg.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * cg.stride + ki) - static_cast<std::ptrdiff_t>(cg.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(cg.height)) continue;
          T* dst = dx + (c * cg.height + static_cast<std::size_t>(iy)) * cg.width;
          const T* src = row + oy * cg.out_w;
          for (std::size_t ox = 0; ox < cg.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * cg.stride + kj) - static_cast<std::ptrdiff_t>(cg.padding);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(cg.width)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation (no kernel flip): input [B,C,H,W], kernel [O,C,kh,kw].
template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride = 1,
                 std::size_t padding = 0) {
  detail::require_rank("conv2d", input, 4);
  detail::require_rank("conv2d", kernel, 4);
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  if (kernel.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " channels, input has " +
                     std::to_string(input.dim(1)));
  }
  ConvGeometry cg{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), kernel.dim(2),
                  kernel.dim(3), stride, padding, 0, 0};
  cg.out_h = conv_out_extent(cg.height, cg.kernel_h, stride, padding, "height");
  cg.out_w = conv_out_extent(cg.width, cg.kernel_w, stride, padding, "width");

  const auto K = cg.patch(), P = cg.pixels(), O = cg.out_channels;
  const auto in_stride = cg.channels * cg.height * cg.width;
  std::vector<T> out(cg.batch * O * P);
  std::vector<T> col(K * P);
  detail::ConstMatMap<T> Wm(kernel.data().data(), O, K);
  for (std::size_t b = 0; b < cg.batch; ++b) {
    detail::im2col(input.data().data() + b * in_stride, cg, col.data());
    detail::MatMap<T>(out.data() + b * O * P, O, P).noalias() = Wm * detail::ConstMatMap<T>(col.data(), K, P);
  }
  Tensor<T> y({cg.batch, O, cg.out_h, cg.out_w}, std::move(out));
  detail::require_finite("conv2d", y);
  if (g.wants_grad({&input, &kernel})) {
    g.record("conv2d", y, [input, kernel, cg](std::span<const T> gy) mutable {
      const auto K = cg.patch(), P = cg.pixels(), O = cg.out_channels;
      const auto in_stride = cg.channels * cg.height * cg.width;
      std::vector<T> col(K * P), dcol;
      detail::ConstMatMap<T> Wm(kernel.data().data(), O, K);
      const bool want_w = kernel.requires_grad();
      const bool want_x = input.requires_grad();
      if (want_x) dcol.resize(K * P);
      for (std::size_t b = 0; b < cg.batch; ++b) {
        detail::ConstMatMap<T> G(gy.data() + b * O * P, O, P);
        if (want_w) {
          detail::im2col(input.data().data() + b * in_stride, cg, col.data());
          detail::MatMap<T>(kernel.grad_mut().data(), O, K).noalias() +=
              G * detail::ConstMatMap<T>(col.data(), K, P).transpose();
        }
        if (want_x) {
          detail::MatMap<T>(dcol.data(), K, P).noalias() = Wm.transpose() * G;
          detail::col2im_add(dcol.data(), cg, input.grad_mut().data() + b * in_stride);
        }
      }
    });
  }
  return y;
}

/// Adds a per-channel vector along axis 1 of [B,C,...].
template <typename T>
Tensor<T> bias_add(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("bias_add: bias " + to_string(bias.shape()) + " does not match " + to_string(x.shape()));
  }
  const auto B = x.dim(0), C = x.dim(1), inner = x.size() / std::max<std::size_t>(B * C, 1);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      T* p = out.data() + (b * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bias[c];
    }
  Tensor<T> y(x.shape(), std::move(out));
  detail::require_finite("bias_add", y);
  if (g.wants_grad({&x, &bias})) {
    g.record("bias_add", y, [x, bias, B, C, inner](std::span<const T> gy) mutable {
      accumulate_grad(x, gy);
      if (!bias.requires_grad()) return;
      auto gb = bias.grad_mut();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const T* p = gy.data() + (b * C + c) * inner;
          T s{0};
          for (std::size_t i = 0; i < inner; ++i) s += p[i];
          gb[c] += s;
        }
    });
  }
  return y;
}

/// y[b,c,...] = scale[.,c] * x[b,c,...] + shift[.,c]; scale and shift are
/// either [C] (shared across the batch) or [B,C] (per instance).
template <typename T>
Tensor<T> scale_shift(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
  if (x.rank() < 2) throw ShapeError("scale_shift: input needs [B,C,...]");
  const auto B = x.dim(0), C = x.dim(1), inner = x.size() / std::max<std::size_t>(B * C, 1);
  auto per_instance = [&](const Tensor<T>& v, std::string_view what) {
    if (v.shape() == Shape{C}) return false;
    if (v.shape() == Shape{B, C}) return true;
    throw ShapeError("scale_shift: " + std::string(what) + " " + to_string(v.shape()) + " does not match " +
                     to_string(x.shape()));
  };
  const bool scale_pi = per_instance(scale, "scale");
  const bool shift_pi = per_instance(shift, "shift");
  std::vector<T> out(x.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T s = scale[scale_pi ? b * C + c : c];
      const T t = shift[shift_pi ? b * C + c : c];
      const auto base = (b * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[base + i] = s * x[base + i] + t;
    }
  Tensor<T> y(x.shape(), std::move(out));
  detail::require_finite("scale_shift", y);
  if (g.wants_grad({&x, &scale, &shift})) {
    g.record("scale_shift", y,
             [x, scale, shift, B, C, inner, scale_pi, shift_pi](std::span<const T> gy) mutable {
               const bool dx = x.requires_grad(), ds = scale.requires_grad(), dt = shift.requires_grad();
               auto gx = dx ? x.grad_mut() : std::span<T>{};
               auto gs = ds ? scale.grad_mut() : std::span<T>{};
               auto gt = dt ? shift.grad_mut() : std::span<T>{};
               for (std::size_t b = 0; b < B; ++b)
                 for (std::size_t c = 0; c < C; ++c) {
                   const auto base = (b * C + c) * inner;
                   const T s = scale[scale_pi ? b * C + c : c];
                   T sum_g{0}, sum_gx{0};
                   for (std::size_t i = 0; i < inner; ++i) {
                     sum_g += gy[base + i];
                     sum_gx += gy[base + i] * x[base + i];
                     if (dx) gx[base + i] += gy[base + i] * s;
                   }
                   if (ds) gs[scale_pi ? b * C + c : c] += sum_gx;
                   if (dt) gt[shift_pi ? b * C + c : c] += sum_g;
                 }
             });
  }
  return y;
}

/// Spatial mean per instance and channel: [B,C,H,W] -> [B,C].
template <typename T>
Tensor<T> global_avg_pool(Graph<T>& g, const Tensor<T>& x) {
  detail::require_rank("global_avg_pool", x, 4);
  const auto B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (P == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  std::vector<T> out(B * C);
  for (std::size_t i = 0; i < B * C; ++i) {
    T s{0};
    for (std::size_t p = 0; p < P; ++p) s += x[i * P + p];
    out[i] = s / static_cast<T>(P);
  }
  Tensor<T> y({B, C}, std::move(out));
  detail::require_finite("global_avg_pool", y);
  if (g.wants_grad({&x})) {
    g.record("global_avg_pool", y, [x, B, C, P](std::span<const T> gy) mutable {
      auto gx = x.grad_mut();
      const T inv = T{1} / static_cast<T>(P);
      for (std::size_t i = 0; i < B * C; ++i)
        for (std::size_t p = 0; p < P; ++p) gx[i * P + p] += gy[i] * inv;
    });
  }
  return y;
}

/// Spatial mean per instance and channel; alias of global_avg_pool kept for
/// statistics code that reads better with the statistical name.
template <typename T>
Tensor<T> channel_mean(Graph<T>& g, const Tensor<T>& x) {
  return global_avg_pool(g, x);
}

/// sqrt(population spatial variance + eps) per instance and channel.
template <typename T>
Tensor<T> channel_std(Graph<T>& g, const Tensor<T>& x, T eps) {
  detail::require_rank("channel_std", x, 4);
  const auto B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (P == 0) throw ShapeError("channel_std: empty spatial extent");
  std::vector<T> mu(B * C), out(B * C);
  for (std::size_t i = 0; i < B * C; ++i) {
    T s{0};
    for (std::size_t p = 0; p < P; ++p) s += x[i * P + p];
    mu[i] = s / static_cast<T>(P);
    T v{0};
    for (std::size_t p = 0; p < P; ++p) {
      const T d = x[i * P + p] - mu[i];
      v += d * d;
    }
    out[i] = std::sqrt(v / static_cast<T>(P) + eps);
  }
  Tensor<T> y({B, C}, std::move(out));
  detail::require_finite("channel_std", y);
  if (g.wants_grad({&x})) {
    g.record("channel_std", y, [x, y, mu = std::move(mu), B, C, P](std::span<const T> gy) mutable {
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < B * C; ++i) {
        const T k = gy[i] / (static_cast<T>(P) * y[i]);
        for (std::size_t p = 0; p < P; ++p) gx[i * P + p] += k * (x[i * P + p] - mu[i]);
      }
    });
  }
  return y;
}

/// Statistics grouping for standardize(): per (instance, channel) over the
/// spatial extent, or per channel over batch and spatial extent.
enum class NormGroup { instance, batch };

template <typename T>
struct GroupStats {
  std::vector<T> mean;
  std::vector<T> var;  // population variance, without eps
};

/// (x - mu) / sqrt(var + eps) with statistics grouped per `group`. Population
/// variance. When `stats` is non-null the group statistics are written there.
template <typename T>
Tensor<T> standardize(Graph<T>& g, const Tensor<T>& x, NormGroup group, T eps, GroupStats<T>* stats = nullptr) {
  if (x.rank() < 2) throw ShapeError("standardize: input needs [B,C,...]");
  const auto B = x.dim(0), C = x.dim(1), inner = x.size() / std::max<std::size_t>(B * C, 1);
  const bool per_instance = group == NormGroup::instance;
  const auto groups = per_instance ? B * C : C;
  const auto count = per_instance ? inner : B * inner;
  if (count == 0) throw ShapeError("standardize: empty statistics extent");

  // Visits every element offset of statistics group k.
  auto for_group = [B, C, inner, per_instance](std::size_t k, auto&& fn) {
    if (per_instance) {
      const auto base = k * inner;
      for (std::size_t i = 0; i < inner; ++i) fn(base + i);
    } else {
      for (std::size_t b = 0; b < B; ++b) {
        const auto base = (b * C + k) * inner;
        for (std::size_t i = 0; i < inner; ++i) fn(base + i);
      }
    }
  };

  std::vector<T> mu(groups), inv_std(groups), var(groups);
  std::vector<T> out(x.size());
  for (std::size_t k = 0; k < groups; ++k) {
    T s{0};
    for_group(k, [&](std::size_t o) { s += x[o]; });
    mu[k] = s / static_cast<T>(count);
    T v{0};
    for_group(k, [&](std::size_t o) {
      const T d = x[o] - mu[k];
      v += d * d;
    });
    var[k] = v / static_cast<T>(count);
    inv_std[k] = T{1} / std::sqrt(var[k] + eps);
    for_group(k, [&](std::size_t o) { out[o] = (x[o] - mu[k]) * inv_std[k]; });
  }
  if (stats) *stats = GroupStats<T>{mu, var};
  Tensor<T> y(x.shape(), std::move(out));
  detail::require_finite("standardize", y);
  if (g.wants_grad({&x})) {
    g.record("standardize", y,
             [x, y, inv_std = std::move(inv_std), for_group, groups, count](std::span<const T> gy) mutable {
               auto gx = x.grad_mut();
               const T n = static_cast<T>(count);
               for (std::size_t k = 0; k < groups; ++k) {
                 T sum_g{0}, sum_gy{0};
                 for_group(k, [&](std::size_t o) {
                   sum_g += gy[o];
                   sum_gy += gy[o] * y[o];
                 });
                 const T mg = sum_g / n, mgy = sum_gy / n;
                 for_group(k, [&](std::size_t o) { gx[o] += inv_std[k] * (gy[o] - mg - y[o] * mgy); });
               }
             });
  }
  return y;
}

/// Normalizes with fixed per-channel statistics (inference-mode batch norm).
/// The statistics are constants; only x receives an adjoint.
template <typename T>
Tensor<T> standardize_fixed(Graph<T>& g, const Tensor<T>& x, std::span<const T> mean, std::span<const T> var,
                            T eps) {
  if (x.rank() < 2 || mean.size() != x.dim(1) || var.size() != x.dim(1)) {
    throw ShapeError("standardize_fixed: statistics do not match " + to_string(x.shape()));
  }
  const auto C = x.dim(1);
  std::vector<T> scale(C), shift(C);
  for (std::size_t c = 0; c < C; ++c) {
    scale[c] = T{1} / std::sqrt(var[c] + eps);
    shift[c] = -mean[c] * scale[c];
  }
  return scale_shift(g, x, Tensor<T>({C}, std::move(scale)), Tensor<T>({C}, std::move(shift)));
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
template <typename T>
Tensor<T> avg_pool2(Graph<T>& g, const Tensor<T>& x) {
  detail::require_rank("avg_pool2", x, 4);
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Ho = H / 2, Wo = W / 2;
  if (Ho == 0 || Wo == 0) throw ShapeError("avg_pool2: spatial extent below 2");
  std::vector<T> out(B * C * Ho * Wo);
  for (std::size_t i = 0; i < B * C; ++i) {
    const T* src = x.data().data() + i * H * W;
    T* dst = out.data() + i * Ho * Wo;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const T* p = src + 2 * oy * W + 2 * ox;
        dst[oy * Wo + ox] = T{0.25} * (p[0] + p[1] + p[W] + p[W + 1]);
      }
  }
  Tensor<T> y({B, C, Ho, Wo}, std::move(out));
  if (g.wants_grad({&x})) {
    g.record("avg_pool2", y, [x, B, C, H, W, Ho, Wo](std::span<const T> gy) mutable {
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < B * C; ++i) {
        T* dst = gx.data() + i * H * W;
        const T* src = gy.data() + i * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const T v = T{0.25} * src[oy * Wo + ox];
            T* p = dst + 2 * oy * W + 2 * ox;
            p[0] += v;
            p[1] += v;
            p[W] += v;
            p[W + 1] += v;
          }
      }
    });
  }
  return y;
}

}  // namespace dgstyle::ops
