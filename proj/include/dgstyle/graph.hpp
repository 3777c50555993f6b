#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dgstyle/tensor.hpp"

namespace dgstyle {

/// Define-by-run tape. Ops append a record (inputs, output, adjoint rule) as
/// they execute; backward() replays the adjoint rules once each, newest first.
/// A graph is rebuilt for every forward pass and must not be shared across
/// threads.
template <typename T>
class Graph {
 public:
  using AdjointFn = std::function<void(std::span<const T> grad_out)>;

  Graph() = default;
  explicit Graph(bool recording) : recording_(recording) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }

  /// True when an op over `inputs` must be recorded.
  bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    for (const auto* t : inputs) {
      if (t->requires_grad()) return true;
    }
    return false;
  }

  /// Records an op. The output is marked requires_grad; the adjoint rule is
  /// responsible for accumulating into whichever inputs require grad.
  void record(std::string_view name, Tensor<T>& output, AdjointFn adjoint) {
    output.set_requires_grad(true);
    records_.push_back(Record{std::string(name), output, std::move(adjoint)});
  }

  std::size_t size() const { return records_.size(); }
  const std::string& op_name(std::size_t i) const { return records_.at(i).name; }

  /// Number of adjoint rules executed by the last backward() call.
  std::size_t replayed() const { return replayed_; }

  /// Populates grad() of every requires_grad tensor reachable from `loss`.
  /// Leaf gradients accumulate across calls; call zero_grad() to reset.
  void backward(Tensor<T> loss) {
    if (loss.size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
      throw Error("backward: loss is detached from every parameter");
    }
    loss.grad_mut()[0] += T{1};
    replayed_ = 0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      auto g = it->output.grad();
      for (const T v : g) {
        if (!std::isfinite(v)) {
          throw NonFiniteError("backward: non-finite adjoint at op '" + it->name + "'");
        }
      }
      it->adjoint(g);
      ++replayed_;
    }
  }

 private:
  struct Record {
    std::string name;
    Tensor<T> output;
    AdjointFn adjoint;
  };
  std::vector<Record> records_;
  bool recording_ = true;
  std::size_t replayed_ = 0;
};

/// Adds `g` into t's gradient slot when t takes part in differentiation.
template <typename T>
void accumulate_grad(const Tensor<T>& t, std::span<const T> g) {
  if (!t.requires_grad()) return;
  auto dst = t.grad_mut();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace dgstyle
