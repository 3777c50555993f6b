#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dgstyle/graph.hpp"
#include "dgstyle/tensor.hpp"

namespace dgstyle {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

/// Scalar objective rebuilt from scratch on every call (define-by-run).
using ScalarFn = std::function<Tensor<double>(Graph<double>&)>;

/// Compares reverse-mode gradients of `f` with respect to each tensor in
/// `inputs` against central differences of `reference` with step `h`. The
/// reference is `f` itself unless `f` contains stop-gradients, in which case
/// it is `f` with the stopped values frozen at the unperturbed point. Error
/// per coordinate is |a - n| / max(1, |a|, |n|). `max_coords` > 0 limits the
/// check to a random subset of coordinates per tensor (drawn with `seed`).
inline GradCheckReport grad_check_against(const ScalarFn& f, const ScalarFn& reference,
                                          std::vector<Tensor<double>> inputs, double h, double tol,
                                          std::size_t max_coords = 0, std::uint64_t seed = 0) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Graph<double> g;
    auto loss = f(g);
    if (!std::isfinite(loss.item())) throw NonFiniteError("grad_check: objective is not finite");
    if (loss.requires_grad()) g.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(t.size(), 0.0));
  }

  auto evaluate = [&reference]() {
    Graph<double> g(false);
    const double v = reference(g).item();
    if (!std::isfinite(v)) throw NonFiniteError("grad_check: objective is not finite under perturbation");
    return v;
  };

  GradCheckReport report;
  std::mt19937_64 rng(seed);
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    std::vector<std::size_t> coords(t.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords > 0 && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (const auto i : coords) {
      auto data = t.mutable_data();
      const double saved = data[i];
      data[i] = saved + h;
      const double up = evaluate();
      data[i] = saved - h;
      const double down = evaluate();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[ti][i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++report.coordinates;
      if (err > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = err;
        report.worst_tensor = ti;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  for (auto& t : inputs) t.zero_grad();
  report.passed = report.max_rel_error < tol;
  return report;
}

inline GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensor<double>> inputs, double h, double tol,
                                  std::size_t max_coords = 0, std::uint64_t seed = 0) {
  return grad_check_against(f, f, std::move(inputs), h, tol, max_coords, seed);
}

/// Single-input form: f maps x to a scalar.
inline GradCheckReport grad_check(const std::function<Tensor<double>(Graph<double>&, const Tensor<double>&)>& f,
                                  Tensor<double> x, double h, double tol) {
  return grad_check([&](Graph<double>& g) { return f(g, x); }, {x}, h, tol);
}

}  // namespace dgstyle
