#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dgstyle/model.hpp"
#include "dgstyle/tensor.hpp"

namespace dgstyle {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw DomainError("adam: lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw DomainError("adam: betas must lie in [0,1)");
    }
    if (!(eps > 0.0)) throw DomainError("adam: eps must be positive");
  }
};

/// One bias-corrected Adam update of `param` in place; t is the 1-based step.
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t t,
                 const AdamConfig& cfg) {
  if (t == 0) throw DomainError("adam: step counter starts at 1");
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = b1 * m[i] + (T{1} - b1) * grad[i];
    v[i] = b2 * v[i] + (T{1} - b2) * grad[i] * grad[i];
    const T m_hat = m[i] / c1;
    const T v_hat = v[i] / c2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

/// Adam over disjoint parameter groups sharing one configuration. A group is
/// stepped (and its step counter advanced) only when at least one of its
/// parameters received a gradient; parameters whose gradient slot is empty
/// are left untouched.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  std::size_t add_group(std::string name, const std::vector<Tensor<T>>& params) {
    Group group{std::move(name), {}, 0};
    for (const auto& p : params) {
      group.slots.push_back(Slot{p, std::vector<T>(p.size(), T{0}), std::vector<T>(p.size(), T{0})});
    }
    groups_.push_back(std::move(group));
    return groups_.size() - 1;
  }

  /// Returns the number of groups stepped. Non-finite gradients abort before
  /// any parameter changes.
  std::size_t step() {
    for (const auto& group : groups_) {
      for (const auto& slot : group.slots) {
        if (!slot.param.has_grad()) continue;
        for (const T gv : slot.param.grad()) {
          if (!std::isfinite(gv)) throw NonFiniteError("adam: non-finite gradient in group '" + group.name + "'");
        }
      }
    }
    std::size_t stepped = 0;
    for (auto& group : groups_) {
      bool any = false;
      for (const auto& slot : group.slots) any = any || slot.param.has_grad();
      if (!any) continue;
      ++group.t;
      ++stepped;
      for (auto& slot : group.slots) {
        if (!slot.param.has_grad()) continue;
        adam_update<T>(slot.param.mutable_data(), slot.param.grad(), slot.m, slot.v, group.t, cfg_);
      }
    }
    return stepped;
  }

  void zero_grad() {
    for (auto& group : groups_)
      for (auto& slot : group.slots) slot.param.zero_grad();
  }

  std::uint64_t group_step(std::size_t group) const { return groups_.at(group).t; }
  const AdamConfig& config() const { return cfg_; }

 private:
  struct Slot {
    Tensor<T> param;
    std::vector<T> m;
    std::vector<T> v;
  };
  struct Group {
    std::string name;
    std::vector<Slot> slots;
    std::uint64_t t;
  };
  AdamConfig cfg_;
  std::vector<Group> groups_;
};

/// shadow <- decay * shadow + (1 - decay) * live for every trainable tensor.
template <typename T>
void ema_update(const ModelParams<T>& live, ModelParams<T>& shadow, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw DomainError("ema: decay must lie in [0,1]");
  const auto src = live.parameters();
  auto dst = shadow.parameters();
  if (src.size() != dst.size()) throw ShapeError("ema: shadow structure differs from live parameters");
  const T d = static_cast<T>(decay), keep = static_cast<T>(1.0 - decay);
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].shape() != dst[i].shape()) throw ShapeError("ema: shadow shape differs from live parameter");
    auto out = dst[i].mutable_data();
    const auto in = src[i].data();
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = d * out[k] + keep * in[k];
  }
}

template <typename T>
void ema_update(ModelState<T>& state, double decay) {
  ema_update(state.live, state.ema, decay);
}

}  // namespace dgstyle
