#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dgstyle/rng.hpp"
#include "dgstyle/tensor.hpp"

namespace dgstyle {

/// Area under the ROC curve as the Mann-Whitney probability that a random
/// positive outscores a random negative, ties counting one half. Returns
/// nullopt when either class is absent.
inline std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: scores and labels differ in length");
  const auto n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mid-ranks (1-based) over tie groups.
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) return std::nullopt;
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta function I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw DomainError("incomplete_beta: a and b must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - std::exp(log_front) * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Student-t cumulative distribution with `df` degrees of freedom.
inline double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw DomainError("student_t_cdf: df must be positive");
  const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
  return t >= 0.0 ? 1.0 - tail : tail;
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;  // two-tailed
  std::size_t df = 0;
  double mean_difference = 0.0;
  bool degenerate = false;  // differences have zero variance; t and p are conventions
};

/// Paired two-tailed t-test on a - b.
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("paired_t_test: samples differ in length");
  const auto k = a.size();
  if (k < 2) throw DomainError("paired_t_test: needs at least two pairs");
  std::vector<double> d(k);
  for (std::size_t i = 0; i < k; ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(k);
  double ss = 0.0;
  for (const double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(k - 1));
  TTestResult r;
  r.df = k - 1;
  r.mean_difference = mean;
  if (sd == 0.0) {
    r.degenerate = true;
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(k)));
  const double df = static_cast<double>(r.df);
  r.p = incomplete_beta(0.5 * df, 0.5, df / (df + r.t * r.t));
  return r;
}

/// k disjoint folds of sample indices covering 0..B-1.
struct FoldAssignment {
  std::vector<std::vector<std::size_t>> folds;

  std::size_t k() const { return folds.size(); }

  /// Every index outside fold `held_out`, ascending.
  std::vector<std::size_t> complement(std::size_t held_out) const {
    std::vector<std::size_t> out;
    for (std::size_t f = 0; f < folds.size(); ++f) {
      if (f == held_out) continue;
      out.insert(out.end(), folds[f].begin(), folds[f].end());
    }
    std::sort(out.begin(), out.end());
    return out;
  }
};

namespace detail {

// Greedy pairwise swaps between folds (sizes unchanged) while any swap lowers
// sum over labels and folds of (positives - target)^2. The greedy pass alone
// leaves late labels unbalanced when samples carry several labels.
inline void refine_folds(const std::vector<std::vector<int>>& labels, std::vector<std::vector<std::size_t>>& folds) {
  const auto k = folds.size();
  const auto num_labels = labels.empty() ? 0 : labels.front().size();
  if (num_labels == 0) return;
  std::vector<std::vector<double>> count(k, std::vector<double>(num_labels, 0.0));
  std::vector<double> target(num_labels, 0.0);
  for (std::size_t f = 0; f < k; ++f)
    for (const auto i : folds[f])
      for (std::size_t l = 0; l < num_labels; ++l) count[f][l] += labels[i][l] != 0 ? 1.0 : 0.0;
  for (std::size_t l = 0; l < num_labels; ++l) {
    for (std::size_t f = 0; f < k; ++f) target[l] += count[f][l];
    target[l] /= static_cast<double>(k);
  }
  // Change in cost when fold a gains d and fold b loses d positives of label l.
  auto delta = [&](std::size_t a, std::size_t b, std::size_t l, double d) {
    const double ea = count[a][l] - target[l], eb = count[b][l] - target[l];
    return (ea + d) * (ea + d) - ea * ea + (eb - d) * (eb - d) - eb * eb;
  };
  constexpr std::size_t kMaxPasses = 50;
  for (std::size_t pass = 0; pass < kMaxPasses; ++pass) {
    bool improved = false;
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = a + 1; b < k; ++b)
        for (auto& i : folds[a])
          for (auto& j : folds[b]) {
            double change = 0.0;
            for (std::size_t l = 0; l < num_labels; ++l) {
              const double d = static_cast<double>((labels[j][l] != 0) - (labels[i][l] != 0));
              if (d != 0.0) change += delta(a, b, l, d);
            }
            if (change >= -1e-9) continue;
            for (std::size_t l = 0; l < num_labels; ++l) {
              const double d = static_cast<double>((labels[j][l] != 0) - (labels[i][l] != 0));
              count[a][l] += d;
              count[b][l] -= d;
            }
            std::swap(i, j);
            improved = true;
          }
    if (!improved) break;
  }
}

}  // namespace detail

/// Iterative stratification for multi-label data. Repeatedly takes the label
/// with the fewest remaining positives and hands each of its samples to the
/// fold that still wants the most of that label, breaking ties by the fold's
/// total remaining demand and then uniformly at random. Unlabelled samples go
/// to the fold with the largest remaining demand. Pairwise swaps then even
/// out per-label counts without changing fold sizes.
inline FoldAssignment stratified_kfold(const std::vector<std::vector<int>>& labels, std::size_t k,
                                       std::uint64_t seed) {
  if (k < 2) throw DomainError("stratified_kfold: k must be >= 2");
  const auto n = labels.size();
  if (n < k) throw DomainError("stratified_kfold: fewer samples than folds");
  const auto num_labels = labels.empty() ? 0 : labels.front().size();
  for (const auto& row : labels) {
    if (row.size() != num_labels) throw ShapeError("stratified_kfold: ragged label matrix");
  }
  Rng rng = make_rng(seed, "stratified_kfold");

  std::vector<double> fold_demand(k, static_cast<double>(n) / static_cast<double>(k));
  std::vector<std::vector<double>> label_demand(num_labels, std::vector<double>(k, 0.0));
  for (std::size_t l = 0; l < num_labels; ++l) {
    double pos = 0.0;
    for (const auto& row : labels) pos += row[l] != 0 ? 1.0 : 0.0;
    std::fill(label_demand[l].begin(), label_demand[l].end(), pos / static_cast<double>(k));
  }

  FoldAssignment out;
  out.folds.resize(k);
  std::vector<bool> assigned(n, false);
  auto assign = [&](std::size_t i, std::size_t f) {
    assigned[i] = true;
    out.folds[f].push_back(i);
    fold_demand[f] -= 1.0;
    for (std::size_t l = 0; l < num_labels; ++l)
      if (labels[i][l] != 0) label_demand[l][f] -= 1.0;
  };
  auto pick_random = [&](const std::vector<std::size_t>& candidates) {
    return candidates.size() == 1 ? candidates.front() : candidates[uniform_index(rng, candidates.size())];
  };
  auto argmax_among = [](const std::vector<std::size_t>& from, const std::vector<double>& score) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto f : from) best = std::max(best, score[f]);
    std::vector<std::size_t> out;
    for (const auto f : from)
      if (score[f] == best) out.push_back(f);
    return out;
  };
  std::vector<std::size_t> all_folds(k);
  std::iota(all_folds.begin(), all_folds.end(), std::size_t{0});

  while (true) {
    std::size_t best_label = num_labels, best_count = 0;
    for (std::size_t l = 0; l < num_labels; ++l) {
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (!assigned[i] && labels[i][l] != 0) ++count;
      if (count > 0 && (best_label == num_labels || count < best_count)) {
        best_label = l;
        best_count = count;
      }
    }
    if (best_label == num_labels) break;
    for (std::size_t i = 0; i < n; ++i) {
      if (assigned[i] || labels[i][best_label] == 0) continue;
      auto candidates = argmax_among(all_folds, label_demand[best_label]);
      if (candidates.size() > 1) candidates = argmax_among(candidates, fold_demand);
      assign(i, pick_random(candidates));
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (assigned[i]) continue;
    assign(i, pick_random(argmax_among(all_folds, fold_demand)));
  }
  detail::refine_folds(labels, out.folds);
  for (auto& fold : out.folds) std::sort(fold.begin(), fold.end());
  return out;
}

}  // namespace dgstyle
