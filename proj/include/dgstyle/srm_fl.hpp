#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dgstyle/ops.hpp"
#include "dgstyle/rng.hpp"
#include "dgstyle/style_ops.hpp"

namespace dgstyle {

/// Backbone stage after which feature-level randomization is applied.
enum class InsertionStage { after_stage_1 = 1, after_stage_2 = 2, after_stage_3 = 3 };

/// Where the per-pixel affine fields come from: the learnable style nets, or
/// the reference map's channel statistics (plain AdaIN).
enum class StyleEmbedding { learnable, predefined };

/// Style-net layer recipe. conv_only is the method; the other two add a
/// ReLU or a batch normalization after each inner convolution.
enum class StyleNetVariant { conv_only, conv_relu, conv_bn };

struct SrmFlConfig {
  double eta = 0.01;
  std::size_t reduction = 4;
  InsertionStage insertion_stage = InsertionStage::after_stage_2;
  StyleEmbedding embedding = StyleEmbedding::learnable;
  StyleNetVariant variant = StyleNetVariant::conv_only;

  void validate() const {
    if (!(eta >= 0.0)) throw DomainError("srm_fl: eta must be non-negative");
    if (reduction == 0) throw DomainError("srm_fl: reduction must be >= 1");
  }
};

template <typename T>
struct ConvLayer {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
  std::size_t padding = 0;
};

/// Four convolutions: 1x1 (C->C), 3x3 (C->C/r), 3x3 (C/r->C), 1x1 (C->C).
template <typename T>
struct StyleNet {
  std::array<ConvLayer<T>, 4> layers;
};

template <typename T>
struct StyleNets {
  StyleNet<T> gamma_net;
  StyleNet<T> beta_net;
  std::size_t channels = 0;
  std::size_t reduction = 1;
  StyleNetVariant variant = StyleNetVariant::conv_only;

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto add = [&out](const std::string& prefix, const StyleNet<T>& net) {
      for (std::size_t i = 0; i < net.layers.size(); ++i) {
        out.emplace_back(prefix + "." + std::to_string(i) + ".weight", net.layers[i].weight);
        out.emplace_back(prefix + "." + std::to_string(i) + ".bias", net.layers[i].bias);
      }
    };
    add("gamma_net", gamma_net);
    add("beta_net", beta_net);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }
};

/// Channel extents of the four layers, input first: C, C, C/r, C, C.
inline std::array<std::size_t, 5> style_net_channels(std::size_t channels, std::size_t reduction) {
  if (reduction == 0 || channels % reduction != 0) {
    throw DomainError("style nets: reduction " + std::to_string(reduction) + " does not divide " +
                      std::to_string(channels) + " channels");
  }
  return {channels, channels, channels / reduction, channels, channels};
}

/// Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights
/// and biases. `zero` yields all-zero parameters (maps are then identically 0).
template <typename T>
StyleNets<T> style_nets_init(std::size_t channels, std::size_t reduction, Rng& rng, bool zero = false,
                             StyleNetVariant variant = StyleNetVariant::conv_only) {
  const auto ext = style_net_channels(channels, reduction);
  constexpr std::array<std::size_t, 4> kernel{1, 3, 3, 1};
  auto make_net = [&]() {
    StyleNet<T> net;
    for (std::size_t i = 0; i < 4; ++i) {
      const auto in = ext[i], out = ext[i + 1], k = kernel[i];
      const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
      std::vector<T> w(out * in * k * k), b(out);
      if (!zero) {
        for (auto& v : w) v = static_cast<T>(uniform(rng, -bound, bound));
        for (auto& v : b) v = static_cast<T>(uniform(rng, -bound, bound));
      }
      net.layers[i].weight = Tensor<T>({out, in, k, k}, std::move(w));
      net.layers[i].weight.set_requires_grad(true);
      net.layers[i].bias = Tensor<T>({out}, std::move(b));
      net.layers[i].bias.set_requires_grad(true);
      net.layers[i].padding = k / 2;
    }
    return net;
  };
  StyleNets<T> nets;
  nets.gamma_net = make_net();
  nets.beta_net = make_net();
  nets.channels = channels;
  nets.reduction = reduction;
  nets.variant = variant;
  return nets;
}

template <typename T>
Tensor<T> style_net_forward(Graph<T>& g, const StyleNet<T>& net, const Tensor<T>& x,
                            StyleNetVariant variant = StyleNetVariant::conv_only) {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& layer = net.layers[i];
    h = ops::bias_add(g, ops::conv2d(g, h, layer.weight, 1, layer.padding), layer.bias);
    if (i + 1 == net.layers.size()) break;
    if (variant == StyleNetVariant::conv_relu) h = ops::relu(g, h);
    if (variant == StyleNetVariant::conv_bn) h = ops::standardize(g, h, ops::NormGroup::batch, T(kStyleEpsilon));
  }
  return h;
}

/// Pixel-wise affine fields, both shaped like the reference map.
template <typename T>
struct StyleMaps {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
StyleMaps<T> style_nets_forward(Graph<T>& g, const StyleNets<T>& nets, const Tensor<T>& x_rs) {
  if (x_rs.rank() != 4 || x_rs.dim(1) != nets.channels) {
    throw ShapeError("style nets: expected [B," + std::to_string(nets.channels) + ",H,W], got " +
                     to_string(x_rs.shape()));
  }
  return {style_net_forward(g, nets.gamma_net, x_rs, nets.variant),
          style_net_forward(g, nets.beta_net, x_rs, nets.variant)};
}

/// gamma_map * (x_c - mu(x_c)) / sigma(x_c) + beta_map, element-wise.
template <typename T>
Tensor<T> apply_style_maps(Graph<T>& g, const StyleMaps<T>& maps, const Tensor<T>& x_c,
                           T epsilon = T(kStyleEpsilon)) {
  if (maps.gamma.shape() != x_c.shape() || maps.beta.shape() != x_c.shape()) {
    throw ShapeError("srm_fl: style maps " + to_string(maps.gamma.shape()) + " do not match content " +
                     to_string(x_c.shape()));
  }
  const auto normalized = ops::standardize(g, x_c, ops::NormGroup::instance, epsilon);
  return ops::add(g, ops::mul(g, maps.gamma, normalized), maps.beta);
}

template <typename T>
Tensor<T> srm_fl_apply(Graph<T>& g, const StyleNets<T>& nets, const Tensor<T>& x_c, const Tensor<T>& x_rs,
                       T epsilon = T(kStyleEpsilon)) {
  if (x_c.shape() != x_rs.shape()) {
    throw ShapeError("srm_fl: content " + to_string(x_c.shape()) + " and reference " + to_string(x_rs.shape()) +
                     " differ");
  }
  return apply_style_maps(g, style_nets_forward(g, nets, x_rs), x_c, epsilon);
}

template <typename T>
struct StyleLosses {
  Tensor<T> content;  // L_c
  Tensor<T> style;    // L_s
  Tensor<T> total;    // L_c + eta * L_s
};

/// Content and Gram-style losses of the style nets. Squared Frobenius norms
/// are taken per instance (sums of squared entries) and averaged over the
/// batch.
template <typename T>
StyleLosses<T> style_net_loss(Graph<T>& g, const Tensor<T>& x_c, const Tensor<T>& x_rs, const Tensor<T>& x_s,
                              double eta) {
  if (x_c.shape() != x_rs.shape() || x_c.shape() != x_s.shape()) {
    throw ShapeError("style_net_loss: tensors must share a shape");
  }
  if (!(eta >= 0.0)) throw DomainError("style_net_loss: eta must be non-negative");
  const auto xc = detail::as_batched(g, x_c, "style_net_loss");
  const auto xr = detail::as_batched(g, x_rs, "style_net_loss");
  const auto xs = detail::as_batched(g, x_s, "style_net_loss");
  const T inv_batch = T{1} / static_cast<T>(xc.dim(0));

  const auto diff = ops::sub(g, xc, xs);
  auto content = ops::mul(g, ops::sum(g, ops::mul(g, diff, diff)), inv_batch);
  const auto gdiff = ops::sub(g, ops::gram(g, xr), ops::gram(g, xs));
  auto style = ops::mul(g, ops::sum(g, ops::mul(g, gdiff, gdiff)), inv_batch);
  auto total = ops::add(g, content, ops::mul(g, style, static_cast<T>(eta)));
  return {content, style, total};
}

}  // namespace dgstyle
