#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dgstyle/ops.hpp"
#include "dgstyle/rng.hpp"
#include "dgstyle/tensor.hpp"

namespace dgstyle {

/// Stability constant added to every variance before the square root.
inline constexpr double kStyleEpsilon = 1e-5;

/// Per-instance, per-channel (mean, std) of a feature map or image.
/// std = sqrt(population variance + epsilon).
struct StyleStats {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::vector<double> mean;
  std::vector<double> std;
  double epsilon = kStyleEpsilon;

  double mean_at(std::size_t b, std::size_t c) const { return mean.at(b * channels + c); }
  double std_at(std::size_t b, std::size_t c) const { return std.at(b * channels + c); }
};

namespace detail {

template <typename T>
Tensor<T> as_batched(Graph<T>& g, const Tensor<T>& x, std::string_view op) {
  if (x.rank() == 4) return x;
  if (x.rank() == 3) return ops::reshape(g, x, Shape{1, x.dim(0), x.dim(1), x.dim(2)});
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [B,C,H,W], got " + to_string(x.shape()));
}

}  // namespace detail

template <typename T>
StyleStats channel_stats(const Tensor<T>& x, double epsilon = kStyleEpsilon) {
  if (!(epsilon > 0.0)) throw DomainError("channel_stats: epsilon must be positive");
  Graph<T> g(false);
  const auto xb = detail::as_batched(g, x, "channel_stats");
  const auto B = xb.dim(0), C = xb.dim(1), P = xb.dim(2) * xb.dim(3);
  if (P == 0) throw ShapeError("channel_stats: empty spatial extent");
  StyleStats s{B, C, std::vector<double>(B * C), std::vector<double>(B * C), epsilon};
  for (std::size_t i = 0; i < B * C; ++i) {
    double sum = 0.0;
    for (std::size_t p = 0; p < P; ++p) sum += static_cast<double>(xb[i * P + p]);
    const double mu = sum / static_cast<double>(P);
    double var = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
      const double d = static_cast<double>(xb[i * P + p]) - mu;
      var += d * d;
    }
    s.mean[i] = mu;
    s.std[i] = std::sqrt(var / static_cast<double>(P) + epsilon);
  }
  return s;
}

/// gamma * (x - mu(x)) / sigma(x) + beta with per-channel gamma, beta of
/// shape [C]. Accepts [C,H,W] or [B,C,H,W]; output has the input's shape.
template <typename T>
Tensor<T> instance_norm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        T epsilon = T(kStyleEpsilon)) {
  const auto xb = detail::as_batched(g, x, "instance_norm");
  const auto C = xb.dim(1);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw ShapeError("instance_norm: affine vectors must have " + std::to_string(C) + " entries");
  }
  auto y = ops::scale_shift(g, ops::standardize(g, xb, ops::NormGroup::instance, epsilon), gamma, beta);
  return x.rank() == 3 ? ops::reshape(g, y, x.shape()) : y;
}

/// Re-styles x_content with the channel statistics of x_ref:
/// sigma(ref) * (x - mu(x)) / sigma(x) + mu(ref). Spatial extents may differ.
template <typename T>
Tensor<T> adain(Graph<T>& g, const Tensor<T>& x_content, const Tensor<T>& x_ref, T epsilon = T(kStyleEpsilon)) {
  const auto xc = detail::as_batched(g, x_content, "adain");
  const auto xr = detail::as_batched(g, x_ref, "adain");
  if (xc.dim(0) != xr.dim(0) || xc.dim(1) != xr.dim(1)) {
    throw ShapeError("adain: content " + to_string(x_content.shape()) + " and reference " +
                     to_string(x_ref.shape()) + " disagree on batch/channels");
  }
  auto y = ops::scale_shift(g, ops::standardize(g, xc, ops::NormGroup::instance, epsilon),
                            ops::channel_std(g, xr, epsilon), ops::channel_mean(g, xr));
  return x_content.rank() == 3 ? ops::reshape(g, y, x_content.shape()) : y;
}

/// Gram matrix of a single [C,H,W] map: (1 / (H W)) M M^T, M = x as [C, H W].
template <typename T>
Tensor<T> gram_matrix(Graph<T>& g, const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("gram_matrix: expected [C,H,W], got " + to_string(x.shape()));
  const auto C = x.dim(0);
  auto G = ops::gram(g, ops::reshape(g, x, Shape{1, C, x.dim(1), x.dim(2)}));
  return ops::reshape(g, G, Shape{C, C});
}

/// Image-level style randomization settings. Statistics are sampled on the
/// raw intensity scale: mean ~ U[x_min, x_max], std ~ U[sigma_floor, x_max].
struct SrmIlConfig {
  double x_min = 0.0;
  double x_max = 255.0;
  double sigma_floor = 1.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(x_min < x_max)) throw DomainError("srm_il: x_min must be below x_max");
    if (!(sigma_floor > 0.0)) throw DomainError("srm_il: sigma_floor must be positive");
    if (!(sigma_floor <= x_max)) throw DomainError("srm_il: sigma_floor exceeds x_max");
  }
};

template <typename T>
struct SrmIlResult {
  Tensor<T> image;
  StyleStats sampled;
};

/// Applies explicit per-channel target statistics; no clamping.
template <typename T>
Tensor<T> restyle_image(const Tensor<T>& image, const std::vector<double>& target_mean,
                        const std::vector<double>& target_std, double epsilon = kStyleEpsilon) {
  if (image.rank() != 3) throw ShapeError("srm_il: expected [C,H,W], got " + to_string(image.shape()));
  const auto C = image.dim(0), P = image.dim(1) * image.dim(2);
  if (target_mean.size() != C || target_std.size() != C) throw ShapeError("srm_il: one statistic per channel");
  const auto src = channel_stats(image, epsilon);
  std::vector<T> out(image.size());
  for (std::size_t c = 0; c < C; ++c) {
    const double scale = target_std[c] / src.std[c];
    for (std::size_t p = 0; p < P; ++p) {
      const double v = static_cast<double>(image[c * P + p]);
      out[c * P + p] = static_cast<T>(scale * (v - src.mean[c]) + target_mean[c]);
    }
  }
  return Tensor<T>(image.shape(), std::move(out));
}

/// Image-level style randomization: draws one (mean, std) per channel from
/// the configured intensity range and transfers it onto `image` ([C,H,W]).
template <typename T>
SrmIlResult<T> srm_il(const Tensor<T>& image, const SrmIlConfig& cfg, Rng& rng) {
  cfg.validate();
  if (image.rank() != 3) throw ShapeError("srm_il: expected [C,H,W], got " + to_string(image.shape()));
  const auto C = image.dim(0);
  StyleStats sampled{1, C, std::vector<double>(C), std::vector<double>(C), kStyleEpsilon};
  for (std::size_t c = 0; c < C; ++c) {
    sampled.mean[c] = uniform(rng, cfg.x_min, cfg.x_max);
    sampled.std[c] = uniform(rng, cfg.sigma_floor, cfg.x_max);
  }
  return {restyle_image(image, sampled.mean, sampled.std), std::move(sampled)};
}

}  // namespace dgstyle
