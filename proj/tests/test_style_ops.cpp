#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dgstyle/gradcheck_battery.hpp"
#include "dgstyle/style_ops.hpp"

using namespace dgstyle;
using Td = Tensor<double>;

namespace {

const double kEps = kStyleEpsilon;

Td random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return battery::random_tensor(std::move(shape), rng, lo, hi);
}

// Random map with per-channel offsets and scales so statistics differ across channels.
Td random_styled(Shape shape, Rng& rng) {
  auto t = random_tensor(shape, rng);
  const auto C = shape[shape.size() - 3];
  const auto P = shape[shape.size() - 2] * shape[shape.size() - 1];
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto c = (i / P) % C;
    d[i] = d[i] * (1.0 + static_cast<double>(c)) + 3.0 * static_cast<double>(c) - 1.0;
  }
  return t;
}

std::vector<std::size_t> argsort(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  return idx;
}

}  // namespace

TEST(ChannelStats, Examples) {
  const auto s = channel_stats(Td({1, 2, 2}, {1, 3, 5, 7}));
  EXPECT_DOUBLE_EQ(s.mean[0], 4.0);
  EXPECT_DOUBLE_EQ(s.std[0], std::sqrt(5.0 + kEps));
  const auto c = channel_stats(Td::full({2, 3, 3}, 2.5));
  EXPECT_DOUBLE_EQ(c.mean[1], 2.5);
  EXPECT_DOUBLE_EQ(c.std[1], std::sqrt(kEps));
  const auto z = channel_stats(Td::zeros({1, 4, 4}));
  EXPECT_EQ(z.mean[0], 0.0);
  EXPECT_DOUBLE_EQ(z.std[0], std::sqrt(kEps));
  EXPECT_THROW(channel_stats(Td::zeros({4, 4})), ShapeError);
}

TEST(InstanceNorm, Examples) {
  Rng rng(1);
  Graph<double> g(false);
  // Spread well above sqrt(eps) so the eps shrinkage of the output std is negligible.
  const auto x = ops::mul(g, random_styled({2, 3, 5, 5}, rng), 10.0);
  const auto y = instance_norm(g, x, Td::full({3}, 1.0), Td::zeros({3}));
  const auto s = channel_stats(y, 1e-300);
  for (std::size_t i = 0; i < s.mean.size(); ++i) {
    EXPECT_NEAR(s.mean[i], 0.0, 1e-12);
    EXPECT_NEAR(s.std[i], 1.0, 1e-5);
  }
  const auto flat = instance_norm(g, x, Td::zeros({3}), Td({3}, {0.5, -1.0, 2.0}));
  for (std::size_t i = 0; i < flat.size(); ++i) EXPECT_EQ(flat[i], (std::vector<double>{0.5, -1.0, 2.0})[(i / 25) % 3]);

  const auto e = instance_norm(g, Td({1, 2, 2}, {1, 3, 5, 7}), Td({1}, {2.0}), Td({1}, {1.0}));
  const double sd = std::sqrt(5.0 + kEps);
  const double expect[] = {-3, -1, 1, 3};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(e[i], 2.0 * expect[i] / sd + 1.0, 1e-12);
  EXPECT_EQ(e.shape(), (Shape{1, 2, 2}));
  EXPECT_THROW(instance_norm(g, x, Td::full({2}, 1.0), Td::zeros({2})), ShapeError);
}

TEST(InstanceNorm, RescaleReconstructsInput) {
  Rng rng(2);
  Graph<double> g(false);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_styled({2, 3, 4, 6}, rng);
    const auto s = channel_stats(x);
    const auto y = instance_norm(g, x, Td::full({3}, 1.0), Td::zeros({3}));
    const auto r = ops::scale_shift(g, y, Td({2, 3}, s.std), Td({2, 3}, s.mean));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(r[i], x[i], 1e-5);
  }
}

TEST(Adain, Examples) {
  Rng rng(3);
  Graph<double> g(false);
  const auto x = random_styled({1, 2, 4, 4}, rng);
  const auto same = adain(g, x, x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(same[i], x[i], 1e-5 * std::max(1.0, std::abs(x[i])));

  const auto c = Td::full({1, 2, 3, 3}, 1.75);
  const auto flat = adain(g, x, c);
  // The output carries sigma(c) = sqrt(eps) as its spread; measure it without
  // adding eps a second time.
  const auto sf = channel_stats(flat, 1e-300), sc = channel_stats(c);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(sf.mean[i], sc.mean[i], 1e-12);
    EXPECT_NEAR(sf.std[i], sc.std[i], 1e-7);
  }

  const auto y = adain(g, Td({1, 2, 2}, {1, 3, 5, 7}), Td({1, 2, 2}, {0, 2, 4, 6}));
  const auto sy = channel_stats(y);
  EXPECT_NEAR(sy.mean[0], 3.0, 1e-5);
  EXPECT_NEAR(sy.std[0], std::sqrt(5.0 + kEps), 1e-5);
  EXPECT_THROW(adain(g, Td::zeros({1, 2, 3, 3}), Td::zeros({1, 3, 3, 3})), ShapeError);
}

TEST(Adain, StatisticsMatchReferenceOver100Cases) {
  Rng rng(4);
  Graph<double> g(false);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 1 + uniform_index(rng, 3), C = 1 + uniform_index(rng, 4);
    const auto xc = random_styled({B, C, 3 + uniform_index(rng, 6), 3 + uniform_index(rng, 6)}, rng);
    const auto xr = random_styled({B, C, 3 + uniform_index(rng, 6), 3 + uniform_index(rng, 6)}, rng);
    const auto y = adain(g, xc, xr);
    const auto sy = channel_stats(y), sr = channel_stats(xr);
    for (std::size_t i = 0; i < sy.mean.size(); ++i) {
      EXPECT_LT(std::abs(sy.mean[i] - sr.mean[i]), 1e-5);
      EXPECT_LT(std::abs(sy.std[i] - sr.std[i]) / sr.std[i], 1e-4);
    }
  }
}

TEST(Adain, IdempotentInStyle) {
  Rng rng(5);
  Graph<double> g(false);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = ops::mul(g, random_styled({2, 3, 5, 5}, rng), 10.0);
    const auto b = ops::mul(g, random_styled({2, 3, 4, 4}, rng), 10.0);
    const auto once = adain(g, a, b);
    const auto twice = adain(g, once, b);
    for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(twice[i], once[i], 1e-5);
  }
}

TEST(Gram, Examples) {
  Graph<double> g(false);
  const auto G = gram_matrix(g, Td({2, 1, 2}, {1, 0, 0, 1}));
  const double expect[] = {0.5, 0, 0, 0.5};
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(G[i], expect[i]);
  const auto Z = gram_matrix(g, Td::zeros({3, 2, 2}));
  for (const double v : Z.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(gram_matrix(g, Td::zeros({1, 3, 2, 2})), ShapeError);
}

TEST(Gram, SymmetricAndPositiveSemidefinite) {
  Rng rng(6);
  Graph<double> g(false);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t C = 1 + uniform_index(rng, 8);
    const auto x = random_tensor({C, 1 + uniform_index(rng, 5), 1 + uniform_index(rng, 5)}, rng, -3.0, 3.0);
    const auto G = gram_matrix(g, x);
    Eigen::MatrixXd m(C, C);
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j) {
        EXPECT_EQ(G[i * C + j], G[j * C + i]);
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = G[i * C + j];
      }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
  }
}

TEST(SrmIl, ForcedStatisticsExamples) {
  Rng rng(7);
  const auto img = random_tensor({1, 6, 6}, rng, 0.0, 255.0);
  const auto s = channel_stats(img);
  const auto same = restyle_image(img, s.mean, s.std);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(same[i], img[i], 1e-5);

  const auto unit = restyle_image(Td({1, 2, 2}, {1, 3, 5, 7}), {0.0}, {1.0});
  const double sd = std::sqrt(5.0 + kEps);
  const double expect[] = {-3, -1, 1, 3};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(unit[i], expect[i] / sd, 1e-12);
}

TEST(SrmIl, SampledStatisticsStayInRangeAndAreMatched) {
  Rng data(8), rng(9);
  const SrmIlConfig cfg;
  for (int trial = 0; trial < 100; ++trial) {
    const auto img = random_tensor({1, 8, 8}, data, 0.0, 255.0);
    const auto r = srm_il(img, cfg, rng);
    ASSERT_EQ(r.sampled.mean.size(), 1u);
    EXPECT_GE(r.sampled.mean[0], 0.0);
    EXPECT_LE(r.sampled.mean[0], 255.0);
    EXPECT_GE(r.sampled.std[0], cfg.sigma_floor);
    EXPECT_LE(r.sampled.std[0], 255.0);
    const auto out = channel_stats(r.image);
    EXPECT_LT(std::abs(out.mean[0] - r.sampled.mean[0]), 1e-5);
    EXPECT_LT(std::abs(out.std[0] - r.sampled.std[0]) / r.sampled.std[0], 1e-4);
  }
}

TEST(SrmIl, PreservesPixelRankOrder) {
  Rng data(10), rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto img = random_tensor({1, 7, 7}, data, 0.0, 255.0);
    const auto out = srm_il(img, SrmIlConfig{}, rng).image;
    EXPECT_EQ(argsort(img.data()), argsort(out.data()));
  }
}

TEST(SrmIl, Errors) {
  Rng rng(0);
  EXPECT_THROW(srm_il(Td::zeros({1, 1, 4, 4}), SrmIlConfig{}, rng), ShapeError);
  EXPECT_THROW(srm_il(Td::zeros({1, 4, 4}), SrmIlConfig{10.0, 5.0, 1.0, 0}, rng), DomainError);
  EXPECT_THROW(srm_il(Td::zeros({1, 4, 4}), SrmIlConfig{0.0, 255.0, 0.0, 0}, rng), DomainError);
  EXPECT_THROW(restyle_image(Td::zeros({2, 4, 4}), {0.0}, {1.0}), ShapeError);
}

TEST(SrmIl, SameStreamSameOutput) {
  Rng data(12);
  const auto img = random_tensor({1, 5, 5}, data, 0.0, 255.0);
  Rng a(99), b(99);
  const auto x = srm_il(img, SrmIlConfig{}, a).image;
  const auto y = srm_il(img, SrmIlConfig{}, b).image;
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], y[i]);
}
