#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dgstyle/gradcheck.hpp"
#include "dgstyle/gradcheck_battery.hpp"
#include "dgstyle/srm_fl.hpp"
#include "dgstyle/style_ops.hpp"

using namespace dgstyle;
using Td = Tensor<double>;

namespace {

Td random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return battery::random_tensor(std::move(shape), rng, lo, hi);
}

StyleNets<double> without_biases(StyleNets<double> nets) {
  for (auto* net : {&nets.gamma_net, &nets.beta_net})
    for (auto& layer : net->layers) layer.bias = Td::zeros(layer.bias.shape());
  return nets;
}

Td constant_map(const Shape& shape, const std::vector<double>& per_instance_channel) {
  const auto P = shape[2] * shape[3];
  std::vector<double> v(numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = per_instance_channel[i / P];
  return Td(shape, std::move(v));
}

}  // namespace

TEST(StyleNets, ChannelTrajectoryAndKernels) {
  const auto ext = style_net_channels(8, 4);
  EXPECT_EQ(ext, (std::array<std::size_t, 5>{8, 8, 2, 8, 8}));
  EXPECT_THROW(style_net_channels(8, 3), DomainError);
  EXPECT_THROW(style_net_channels(8, 0), DomainError);
  Rng rng(0);
  EXPECT_THROW(style_nets_init<double>(8, 3, rng), DomainError);

  const auto nets = style_nets_init<double>(8, 4, rng);
  const std::size_t kernels[] = {1, 3, 3, 1};
  for (const auto* net : {&nets.gamma_net, &nets.beta_net}) {
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& w = net->layers[i].weight;
      EXPECT_EQ(w.shape(), (Shape{ext[i + 1], ext[i], kernels[i], kernels[i]}));
      EXPECT_EQ(net->layers[i].bias.shape(), (Shape{ext[i + 1]}));
      EXPECT_EQ(net->layers[i].padding, kernels[i] / 2);
      const double bound = 1.0 / std::sqrt(static_cast<double>(ext[i] * kernels[i] * kernels[i]));
      for (const double v : w.data()) EXPECT_LE(std::abs(v), bound);
    }
  }
  EXPECT_EQ(nets.named_parameters().size(), 16u);
}

TEST(StyleNets, ZeroNetsGiveZeroMapsAndOutput) {
  Rng rng(1);
  Graph<double> g(false);
  const auto nets = style_nets_init<double>(4, 2, rng, true);
  const auto x = random_tensor({2, 4, 5, 5}, rng);
  const auto maps = style_nets_forward(g, nets, x);
  for (const double v : maps.gamma.data()) EXPECT_EQ(v, 0.0);
  for (const double v : maps.beta.data()) EXPECT_EQ(v, 0.0);
  const auto out = srm_fl_apply(g, nets, random_tensor({2, 4, 5, 5}, rng), x);
  for (const double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(StyleNets, SpatialShapePreserved) {
  Rng rng(2);
  Graph<double> g(false);
  const auto nets = style_nets_init<double>(8, 4, rng);
  const auto maps = style_nets_forward(g, nets, random_tensor({3, 8, 7, 7}, rng));
  EXPECT_EQ(maps.gamma.shape(), (Shape{3, 8, 7, 7}));
  EXPECT_EQ(maps.beta.shape(), (Shape{3, 8, 7, 7}));
  EXPECT_THROW(style_nets_forward(g, nets, random_tensor({3, 4, 7, 7}, rng)), ShapeError);
}

TEST(StyleNets, ForwardIsLinear) {
  Rng rng(3);
  Graph<double> g(false);
  const auto biased = style_nets_init<double>(8, 4, rng);
  const auto nets = without_biases(biased);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = random_tensor({2, 8, 6, 6}, rng), y = random_tensor({2, 8, 6, 6}, rng);
    const auto fx = style_nets_forward(g, nets, x), fy = style_nets_forward(g, nets, y);
    const auto fxy = style_nets_forward(g, nets, ops::add(g, x, y));
    const auto f2x = style_nets_forward(g, nets, ops::mul(g, x, 2.0));
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_NEAR(fxy.gamma[i], fx.gamma[i] + fy.gamma[i], 1e-8);
      EXPECT_NEAR(fxy.beta[i], fx.beta[i] + fy.beta[i], 1e-8);
      EXPECT_EQ(f2x.gamma[i], 2.0 * fx.gamma[i]);
      EXPECT_EQ(f2x.beta[i], 2.0 * fx.beta[i]);
    }

    // With biases the map is affine: subtracting the response to 0 leaves a linear map.
    const auto zero = Td::zeros(x.shape());
    const auto b0 = style_nets_forward(g, biased, zero);
    const auto bx = style_nets_forward(g, biased, x), b3x = style_nets_forward(g, biased, ops::mul(g, x, 3.0));
    for (std::size_t i = 0; i < x.size(); ++i)
      EXPECT_NEAR(b3x.gamma[i] - b0.gamma[i], 3.0 * (bx.gamma[i] - b0.gamma[i]), 1e-10);
  }
}

TEST(SrmFlApply, ConstantMapsExample) {
  Graph<double> g(false);
  const Td xc({1, 1, 2, 2}, {1, 3, 5, 7});
  const StyleMaps<double> maps{Td::full({1, 1, 2, 2}, 2.0), Td::full({1, 1, 2, 2}, 1.0)};
  const auto out = apply_style_maps(g, maps, xc);
  const double sd = std::sqrt(5.0 + kStyleEpsilon);
  const double normalized[] = {-3 / sd, -1 / sd, 1 / sd, 3 / sd};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(out[i], 2.0 * normalized[i] + 1.0, 1e-12);
  EXPECT_THROW(apply_style_maps(g, maps, Td::zeros({1, 1, 3, 3})), ShapeError);
}

TEST(SrmFlApply, ReducesToAdainUnderChannelStatisticMaps) {
  Rng rng(4);
  Graph<double> g(false);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape shape{1 + uniform_index(rng, 3), 1 + uniform_index(rng, 5), 2 + uniform_index(rng, 6),
                      2 + uniform_index(rng, 6)};
    const auto xc = random_tensor(shape, rng, -2.0, 3.0);
    const auto xr = random_tensor(shape, rng, 0.0, 5.0);
    const auto s = channel_stats(xr);
    const StyleMaps<double> maps{constant_map(shape, s.std), constant_map(shape, s.mean)};
    const auto out = apply_style_maps(g, maps, xc);
    const auto ref = adain(g, xc, xr);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-6);
  }
}

TEST(SrmFlApply, ShapeMismatch) {
  Rng rng(5);
  Graph<double> g(false);
  const auto nets = style_nets_init<double>(4, 2, rng);
  EXPECT_THROW(srm_fl_apply(g, nets, Td::zeros({1, 4, 4, 4}), Td::zeros({1, 4, 5, 5})), ShapeError);
}

TEST(StyleNetLoss, Examples) {
  Graph<double> g(false);
  const auto zero = Td::zeros({1, 2, 2});
  const auto ones = Td::full({1, 2, 2}, 1.0);
  const auto l = style_net_loss(g, zero, ones, ones, 0.0);
  EXPECT_DOUBLE_EQ(l.content.item(), 4.0);
  EXPECT_DOUBLE_EQ(l.total.item(), 4.0);

  Rng rng(6);
  const auto x = random_tensor({2, 3, 4, 4}, rng);
  const auto same = style_net_loss(g, x, x, x, 0.5);
  EXPECT_EQ(same.total.item(), 0.0);

  const auto a = random_tensor({2, 3, 4, 4}, rng), b = random_tensor({2, 3, 4, 4}, rng);
  const auto l0 = style_net_loss(g, x, a, b, 0.0);
  EXPECT_EQ(l0.total.item(), l0.content.item());
  const auto l1 = style_net_loss(g, x, a, b, 0.25);
  EXPECT_NEAR(l1.total.item(), l1.content.item() + 0.25 * l1.style.item(), 1e-12);
  EXPECT_GT(l1.style.item(), 0.0);

  EXPECT_THROW(style_net_loss(g, x, a, Td::zeros({2, 3, 4, 5}), 0.1), ShapeError);
  EXPECT_THROW(style_net_loss(g, x, a, b, -1.0), DomainError);
}

TEST(StyleNetLoss, GradCheckOnStyleNetWeights) {
  Rng rng(7);
  const auto nets = style_nets_init<double>(4, 2, rng);
  const auto xc = random_tensor({1, 4, 5, 5}, rng), xr = random_tensor({1, 4, 5, 5}, rng, -2.0, 2.0);
  const auto f = [&](Graph<double>& g) {
    const auto xs = srm_fl_apply(g, nets, xc, xr);
    return style_net_loss(g, xc, xr, xs, 0.01).total;
  };
  const auto report = grad_check(f, nets.parameters(), 1e-5, 1e-4);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  EXPECT_GT(report.coordinates, 100u);
}
