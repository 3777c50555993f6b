#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dgstyle/ops.hpp"

namespace dgstyle {

/// Probabilities are clamped into [kProbClamp, 1 - kProbClamp] before any log.
inline constexpr double kProbClamp = 1e-7;

struct FocalConfig {
  double alpha_t = 0.25;
  double gamma_prime = 2.0;

  void validate() const {
    if (!(alpha_t > 0.0 && alpha_t < 1.0)) throw DomainError("focal: alpha_t must lie in (0,1)");
    if (!(gamma_prime >= 0.0)) throw DomainError("focal: gamma' must be non-negative");
  }
};

namespace detail {

template <typename T>
Tensor<T> clamp_probs(Graph<T>& g, const Tensor<T>& p) {
  return ops::clamp(g, p, static_cast<T>(kProbClamp), static_cast<T>(1.0 - kProbClamp));
}

template <typename T>
void require_binary(const Tensor<T>& labels) {
  for (const T v : labels.data()) {
    if (v != T{0} && v != T{1}) throw DomainError("focal: labels must be 0 or 1");
  }
}

template <typename T>
Tensor<T> constant_like(const Tensor<T>& shape_of, std::vector<T> values) {
  return Tensor<T>(shape_of.shape(), std::move(values));
}

// Bernoulli KL(target || q) per coordinate, target treated as a constant.
template <typename T>
Tensor<T> bernoulli_kl(Graph<T>& g, const Tensor<T>& target, const Tensor<T>& q) {
  const auto t = ops::stop_gradient(target);
  const auto one_t = ops::sub(g, T{1}, t);
  const auto pos = ops::mul(g, t, ops::sub(g, ops::log(g, t), ops::log(g, q)));
  const auto neg = ops::mul(g, one_t, ops::sub(g, ops::log(g, one_t), ops::log(g, ops::sub(g, T{1}, q))));
  return ops::add(g, pos, neg);
}

}  // namespace detail

/// Multi-label focal loss: mean over all B*N entries of
/// -alpha_t (1 - p_t)^gamma' log p_t.
template <typename T>
Tensor<T> focal_loss(Graph<T>& g, const Tensor<T>& probs, const Tensor<T>& labels, const FocalConfig& cfg) {
  cfg.validate();
  ops::detail::require_same_shape("focal_loss", probs, labels);
  detail::require_binary(labels);
  const auto n = labels.size();
  std::vector<T> sign(n), offset(n), neg_alpha(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = labels[i] == T{1};
    sign[i] = pos ? T{1} : T{-1};
    offset[i] = pos ? T{0} : T{1};
    neg_alpha[i] = static_cast<T>(pos ? -cfg.alpha_t : -(1.0 - cfg.alpha_t));
  }
  const auto p = detail::clamp_probs(g, probs);
  const auto p_t = ops::add(g, ops::mul(g, p, detail::constant_like(p, std::move(sign))),
                            detail::constant_like(p, std::move(offset)));
  const auto modulator = ops::pow(g, ops::sub(g, T{1}, p_t), static_cast<T>(cfg.gamma_prime));
  const auto weighted = ops::mul(g, ops::mul(g, modulator, ops::log(g, p_t)),
                                 detail::constant_like(p, std::move(neg_alpha)));
  return ops::mean(g, weighted);
}

/// Symmetric Bernoulli KL with stop-gradient on the target side of each term:
/// 0.5 * [KL(p1* || p2) + KL(p2* || p1)], averaged over all entries.
/// p2 receives adjoints only from the first term, p1 only from the second.
template <typename T>
Tensor<T> kld_sym(Graph<T>& g, const Tensor<T>& p1, const Tensor<T>& p2) {
  ops::detail::require_same_shape("kld_sym", p1, p2);
  const auto q1 = detail::clamp_probs(g, p1);
  const auto q2 = detail::clamp_probs(g, p2);
  const auto forward_term = ops::mean(g, detail::bernoulli_kl(g, q1, q2));
  const auto reverse_term = ops::mean(g, detail::bernoulli_kl(g, q2, q1));
  return ops::mul(g, ops::add(g, forward_term, reverse_term), T{0.5});
}

/// instance_sum: ||F_s - F||_F^2 per instance, averaged over the batch.
/// element_mean: the same squared error averaged over every element.
enum class ConsistencyReduction { instance_sum, element_mean };

/// Squared-error content consistency. No stop-gradient: both branches
/// receive adjoints.
template <typename T>
Tensor<T> content_consistency(Graph<T>& g, const Tensor<T>& f_stylized, const Tensor<T>& f_clean,
                              ConsistencyReduction reduction = ConsistencyReduction::instance_sum) {
  ops::detail::require_same_shape("content_consistency", f_stylized, f_clean);
  if (f_clean.rank() == 0 || f_clean.dim(0) == 0) throw ShapeError("content_consistency: empty batch");
  const auto d = ops::sub(g, f_stylized, f_clean);
  const auto denom = reduction == ConsistencyReduction::instance_sum ? f_clean.dim(0) : f_clean.size();
  return ops::mul(g, ops::sum(g, ops::mul(g, d, d)), T{1} / static_cast<T>(denom));
}

/// Predictive distribution regularization between stylized and clean outputs.
template <typename T>
Tensor<T> pdr_loss(Graph<T>& g, const Tensor<T>& p_stylized, const Tensor<T>& p_clean) {
  return kld_sym(g, p_stylized, p_clean);
}

struct LossBundle {
  double l_cls = 0.0;
  double l_ccr = 0.0;
  double l_pdr = 0.0;
  double l_cons = 0.0;
  double l_total = 0.0;
  double l_phi = 0.0;
};

inline LossBundle combine(double l_cls, double l_ccr, double l_pdr, double l_phi) {
  for (const double v : {l_cls, l_ccr, l_pdr, l_phi}) {
    if (!std::isfinite(v)) throw NonFiniteError("combine: non-finite loss component");
  }
  LossBundle b{l_cls, l_ccr, l_pdr, 0.0, 0.0, l_phi};
  b.l_cons = (l_ccr + l_pdr) / 2.0;
  b.l_total = l_cls + b.l_cons;
  return b;
}

}  // namespace dgstyle
