#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dgstyle/gradcheck.hpp"
#include "dgstyle/losses.hpp"
#include "dgstyle/model.hpp"
#include "dgstyle/ops.hpp"
#include "dgstyle/rng.hpp"
#include "dgstyle/srm_fl.hpp"
#include "dgstyle/style_ops.hpp"

namespace dgstyle {

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
  double seconds = 0.0;
};

namespace battery {

using G = Graph<double>;
using Tn = Tensor<double>;

inline Tn random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return Tn(std::move(shape), std::move(v));
}

/// Values with |x| in [lo, hi] and random sign, to stay clear of kinks at 0.
inline Tn signed_away_from_zero(Shape shape, Rng& rng, double lo = 0.1, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0) * uniform(rng, lo, hi);
  return Tn(std::move(shape), std::move(v));
}

/// sum_i w_i y_i with fixed, non-uniform weights so that every output
/// coordinate carries a distinct adjoint.
inline Tn project(G& g, const Tn& y) {
  std::vector<double> w(y.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::cos(0.7 * static_cast<double>(i) + 0.3) + 0.2;
  return ops::sum(g, ops::mul(g, y, Tn(y.shape(), std::move(w))));
}

// 0.5 * [mean KL(a || clamp(p2)) + mean KL(b || clamp(p1))] with a, b constants:
// the symmetric KL with its stop-gradient targets frozen.
inline Tn frozen_kld(G& g, const Tn& p1, const Tn& p2, const Tn& a, const Tn& b) {
  const auto q1 = detail::clamp_probs(g, p1);
  const auto q2 = detail::clamp_probs(g, p2);
  const auto f = ops::mean(g, detail::bernoulli_kl(g, a, q2));
  const auto r = ops::mean(g, detail::bernoulli_kl(g, b, q1));
  return ops::mul(g, ops::add(g, f, r), 0.5);
}

inline Tn clamped_constant(const Tn& p) {
  G g(false);
  return detail::clamp_probs(g, p).detach();
}

/// Small dual-branch model (IBN: instance norm in stages 1-2, batch norm in
/// 3-4) with randomized norm affines so no ReLU sits on its kink.
inline std::pair<ModelState<double>, StyleNets<double>> small_model(Rng& rng) {
  BackboneConfig cfg;
  cfg.stage_channels = {4, 8, 8, 8};
  cfg.input_size = 8;
  cfg.num_classes = 3;
  cfg.block_norm = NormKind::batch;
  cfg.use_instance_norm_in_early_stages = true;
  auto state = model_init<double>(cfg, rng);
  for (auto& stage : state.live.stages)
    for (auto& block : stage) {
      for (auto& v : block.gamma.mutable_data()) v = uniform(rng, 0.5, 1.5);
      for (auto& v : block.beta.mutable_data()) v = uniform(rng, -0.5, 0.5);
    }
  for (auto& v : state.live.classifier_bias.mutable_data()) v = uniform(rng, -0.3, 0.3);
  auto nets = style_nets_init<double>(cfg.stage_channels[1], 4, rng);
  return {std::move(state), std::move(nets)};
}

}  // namespace battery

/// Central-difference verification of every differentiable op, the style-net
/// objective and the composed dual-branch training objective, in double
/// precision. Stop-gradient terms are checked against the same expression
/// with the stopped values frozen.
inline std::vector<GradCheckCase> run_gradcheck_battery(std::uint64_t seed = 0, double tol = 1e-4) {
  using namespace battery;
  Rng rng = make_rng(seed, "gradcheck");
  const double h = 1e-6;
  std::vector<GradCheckCase> out;
  auto run = [&](std::string name, const std::function<GradCheckReport()>& check) {
    const auto start = std::chrono::steady_clock::now();
    GradCheckCase c{std::move(name), check(), 0.0};
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.push_back(std::move(c));
  };
  auto unary = [&](std::string name, Tn x, std::function<Tn(G&, const Tn&)> op) {
    run(std::move(name), [&] { return grad_check([&](G& g) { return project(g, op(g, x)); }, {x}, h, tol); });
  };
  auto binary = [&](std::string name, Tn a, Tn b, std::function<Tn(G&, const Tn&, const Tn&)> op) {
    run(std::move(name), [&] { return grad_check([&](G& g) { return project(g, op(g, a, b)); }, {a, b}, h, tol); });
  };

  // Element-wise.
  const Shape s{2, 3, 4};
  binary("add", random_tensor(s, rng), random_tensor(s, rng), [](G& g, const Tn& a, const Tn& b) { return ops::add(g, a, b); });
  binary("sub", random_tensor(s, rng), random_tensor(s, rng), [](G& g, const Tn& a, const Tn& b) { return ops::sub(g, a, b); });
  binary("mul", random_tensor(s, rng), random_tensor(s, rng), [](G& g, const Tn& a, const Tn& b) { return ops::mul(g, a, b); });
  binary("div", random_tensor(s, rng), random_tensor(s, rng, 0.5, 2.0),
         [](G& g, const Tn& a, const Tn& b) { return ops::div(g, a, b); });
  unary("add_scalar", random_tensor(s, rng), [](G& g, const Tn& a) { return ops::add(g, a, 0.3); });
  unary("scalar_sub", random_tensor(s, rng), [](G& g, const Tn& a) { return ops::sub(g, 1.0, a); });
  unary("mul_scalar", random_tensor(s, rng), [](G& g, const Tn& a) { return ops::mul(g, a, -1.7); });
  unary("div_scalar", random_tensor(s, rng), [](G& g, const Tn& a) { return ops::div(g, a, 2.5); });
  unary("neg", random_tensor(s, rng), [](G& g, const Tn& a) { return ops::neg(g, a); });
  unary("exp", random_tensor(s, rng), [](G& g, const Tn& a) { return ops::exp(g, a); });
  unary("log", random_tensor(s, rng, 0.2, 3.0), [](G& g, const Tn& a) { return ops::log(g, a); });
  unary("sqrt", random_tensor(s, rng, 0.2, 3.0), [](G& g, const Tn& a) { return ops::sqrt(g, a); });
  unary("pow", random_tensor(s, rng, 0.2, 2.0), [](G& g, const Tn& a) { return ops::pow(g, a, 2.5); });
  unary("relu", signed_away_from_zero(s, rng), [](G& g, const Tn& a) { return ops::relu(g, a); });
  unary("sigmoid", random_tensor(s, rng, -3.0, 3.0), [](G& g, const Tn& a) { return ops::sigmoid(g, a); });
  unary("clamp", signed_away_from_zero(s, rng, 0.1, 0.9),
        [](G& g, const Tn& a) { return ops::clamp(g, ops::mul(g, a, 2.0), -1.0, 1.0); });

  // Shape and reductions.
  unary("reshape", random_tensor(s, rng), [](G& g, const Tn& a) { return ops::reshape(g, a, Shape{4, 6}); });
  unary("transpose", random_tensor({3, 5}, rng), [](G& g, const Tn& a) { return ops::transpose(g, a); });
  unary("gather_batch", random_tensor({4, 2, 3}, rng),
        [](G& g, const Tn& a) { return ops::gather_batch(g, a, {2, 0, 2, 1}); });
  unary("sum_all", random_tensor(s, rng), [](G& g, const Tn& a) { return ops::sum(g, a); });
  unary("sum_axis", random_tensor(s, rng), [](G& g, const Tn& a) { return ops::sum(g, a, {1}); });
  unary("mean_axes", random_tensor(s, rng), [](G& g, const Tn& a) { return ops::mean(g, a, {0, 2}); });
  binary("matmul", random_tensor({3, 4}, rng), random_tensor({4, 2}, rng),
         [](G& g, const Tn& a, const Tn& b) { return ops::matmul(g, a, b); });
  unary("gram", random_tensor({2, 3, 4, 5}, rng), [](G& g, const Tn& a) { return ops::gram(g, a); });

  // Convolution, pooling, normalization.
  binary("conv2d_s1_p1", random_tensor({2, 3, 5, 5}, rng), random_tensor({4, 3, 3, 3}, rng),
         [](G& g, const Tn& x, const Tn& k) { return ops::conv2d(g, x, k, 1, 1); });
  binary("conv2d_s2_p0", random_tensor({1, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng),
         [](G& g, const Tn& x, const Tn& k) { return ops::conv2d(g, x, k, 2, 0); });
  binary("conv2d_1x1", random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 1, 1}, rng),
         [](G& g, const Tn& x, const Tn& k) { return ops::conv2d(g, x, k); });
  binary("bias_add", random_tensor({2, 3, 4, 4}, rng), random_tensor({3}, rng),
         [](G& g, const Tn& x, const Tn& b) { return ops::bias_add(g, x, b); });
  {
    auto x = random_tensor({2, 3, 4, 4}, rng), sc = random_tensor({3}, rng), sh = random_tensor({3}, rng);
    run("scale_shift_shared",
        [&] { return grad_check([&](G& g) { return project(g, ops::scale_shift(g, x, sc, sh)); }, {x, sc, sh}, h, tol); });
    auto sci = random_tensor({2, 3}, rng), shi = random_tensor({2, 3}, rng);
    run("scale_shift_per_instance", [&] {
      return grad_check([&](G& g) { return project(g, ops::scale_shift(g, x, sci, shi)); }, {x, sci, shi}, h, tol);
    });
  }
  unary("global_avg_pool", random_tensor({2, 3, 4, 5}, rng), [](G& g, const Tn& a) { return ops::global_avg_pool(g, a); });
  unary("channel_mean", random_tensor({2, 3, 4, 5}, rng), [](G& g, const Tn& a) { return ops::channel_mean(g, a); });
  unary("channel_std", random_tensor({2, 3, 4, 5}, rng), [](G& g, const Tn& a) { return ops::channel_std(g, a, 1e-5); });
  unary("standardize_instance", random_tensor({2, 3, 4, 4}, rng),
        [](G& g, const Tn& a) { return ops::standardize(g, a, ops::NormGroup::instance, 1e-5); });
  unary("standardize_batch", random_tensor({3, 2, 3, 3}, rng),
        [](G& g, const Tn& a) { return ops::standardize(g, a, ops::NormGroup::batch, 1e-5); });
  {
    const std::vector<double> mean{0.1, -0.2, 0.3}, var{0.5, 1.5, 2.0};
    unary("standardize_fixed", random_tensor({2, 3, 3, 3}, rng), [mean, var](G& g, const Tn& a) {
      return ops::standardize_fixed(g, a, std::span<const double>(mean), std::span<const double>(var), 1e-5);
    });
  }
  unary("avg_pool2", random_tensor({2, 2, 5, 5}, rng), [](G& g, const Tn& a) { return ops::avg_pool2(g, a); });

  // Style operators.
  {
    auto x = random_tensor({3, 4, 5}, rng), gamma = random_tensor({3}, rng), beta = random_tensor({3}, rng);
    run("instance_norm", [&] {
      return grad_check([&](G& g) { return project(g, instance_norm(g, x, gamma, beta)); }, {x, gamma, beta}, h, tol);
    });
  }
  binary("adain", random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 3, 5}, rng),
         [](G& g, const Tn& c, const Tn& r) { return adain(g, c, r); });
  unary("gram_matrix", random_tensor({3, 4, 4}, rng), [](G& g, const Tn& a) { return gram_matrix(g, a); });

  // Style nets.
  for (const auto variant : {StyleNetVariant::conv_only, StyleNetVariant::conv_relu, StyleNetVariant::conv_bn}) {
    auto nets = style_nets_init<double>(4, 2, rng, false, variant);
    auto xc = random_tensor({2, 4, 4, 4}, rng), xr = random_tensor({2, 4, 4, 4}, rng);
    auto inputs = nets.parameters();
    inputs.push_back(xc);
    inputs.push_back(xr);
    const char* names[] = {"srm_fl_apply_conv", "srm_fl_apply_conv_relu", "srm_fl_apply_conv_bn"};
    run(names[static_cast<int>(variant)], [&] {
      return grad_check([&](G& g) { return project(g, srm_fl_apply(g, nets, xc, xr)); }, inputs, h, tol);
    });
  }

  // Losses.
  {
    auto probs = random_tensor({4, 3}, rng, 0.05, 0.95);
    const Tn labels({4, 3}, {1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 1});
    run("focal_loss", [&] {
      return grad_check([&](G& g) { return focal_loss(g, probs, labels, FocalConfig{}); }, {probs}, h, tol);
    });
    run("focal_loss_gamma0", [&] {
      return grad_check([&](G& g) { return focal_loss(g, probs, labels, FocalConfig{0.5, 0.0}); }, {probs}, h, tol);
    });
  }
  {
    auto p1 = random_tensor({4, 3}, rng, 0.05, 0.95), p2 = random_tensor({4, 3}, rng, 0.05, 0.95);
    const auto a = clamped_constant(p1), b = clamped_constant(p2);
    run("kld_sym", [&] {
      return grad_check_against([&](G& g) { return kld_sym(g, p1, p2); },
                                [&](G& g) { return frozen_kld(g, p1, p2, a, b); }, {p1, p2}, h, tol);
    });
  }
  {
    auto fs = random_tensor({2, 3, 2, 2}, rng), f = random_tensor({2, 3, 2, 2}, rng);
    run("content_consistency", [&] {
      return grad_check([&](G& g) { return content_consistency(g, fs, f); }, {fs, f}, h, tol);
    });
    run("content_consistency_element_mean", [&] {
      return grad_check([&](G& g) { return content_consistency(g, fs, f, ConsistencyReduction::element_mean); },
                        {fs, f}, h, tol);
    });
  }
  {
    auto zc = random_tensor({2, 4, 3, 3}, rng), zr = random_tensor({2, 4, 3, 3}, rng), zs = random_tensor({2, 4, 3, 3}, rng);
    run("style_net_loss", [&] {
      return grad_check([&](G& g) { return style_net_loss(g, zc, zr, zs, 0.5).total; }, {zc, zr, zs}, h, tol);
    });
  }

  // Classifier head.
  {
    auto model = small_model(rng);
    auto& state = model.first;
    auto features = random_tensor({2, 8, 1, 1}, rng);
    auto inputs = std::vector<Tn>{features, state.live.classifier_weight, state.live.classifier_bias};
    run("classify", [&] {
      return grad_check([&](G& g) { return project(g, classify(g, state.live, features).probs); }, inputs, h, tol);
    });
  }

  // Composed objectives on a 2x1x8x8 batch.
  {
    auto model = small_model(rng);
    auto& state = model.first;
    const auto& nets = model.second;
    const auto x = random_tensor({2, 1, 8, 8}, rng, -1.5, 1.5);
    const auto xs = random_tensor({2, 1, 8, 8}, rng, -1.5, 1.5);
    const Tn labels({2, 3}, {1, 0, 1, 0, 1, 0});
    const std::vector<std::size_t> pairing{1, 0};
    SrmFlConfig fl;
    fl.eta = 0.5;

    // Values held constant by stop-gradients, taken at the unperturbed point.
    StyleMaps<double> frozen_maps;
    Tn frozen_ps, frozen_p, frozen_z1, frozen_z2;
    {
      G g(false);
      DualOptions<double> opt;
      opt.srm_fl = fl;
      opt.style_override = [&](G& cg, const Tn& ref) {
        frozen_maps = style_nets_forward(cg, nets, ref);
        frozen_z2 = ref.detach();
        return frozen_maps;
      };
      const auto o = forward_dual(g, state, &nets, x, xs, pairing, opt);
      frozen_ps = clamped_constant(o.stylized.probs);
      frozen_p = clamped_constant(o.clean.probs);
      frozen_z1 = forward_stages(g, state.live, state.config, xs, 1, 2, ForwardContext<double>{}).detach();
    }

    auto l_total = [&](G& g, bool reference) {
      DualOptions<double> opt;
      opt.srm_fl = fl;
      if (reference) opt.style_override = [&](G&, const Tn&) { return frozen_maps; };
      const auto o = forward_dual(g, state, &nets, x, xs, pairing, opt);
      const auto cls = focal_loss(g, o.stylized.probs, labels, FocalConfig{});
      const auto ccr = content_consistency(g, o.features_stylized, o.features);
      const auto pdr = reference ? frozen_kld(g, o.stylized.probs, o.clean.probs, frozen_ps, frozen_p)
                                 : pdr_loss(g, o.stylized.probs, o.clean.probs);
      return ops::add(g, cls, ops::mul(g, ops::add(g, ccr, pdr), 0.5));
    };
    auto inputs = state.live.parameters();
    for (const auto& p : nets.parameters()) inputs.push_back(p);
    run("l_total_dual_branch", [&] {
      return grad_check_against([&](G& g) { return l_total(g, false); }, [&](G& g) { return l_total(g, true); },
                                inputs, h, tol);
    });
    run("l_phi_style_nets", [&] {
      return grad_check(
          [&](G& g) {
            const auto maps = style_nets_forward(g, nets, frozen_z2);
            return style_net_loss(g, frozen_z1, frozen_z2, apply_style_maps(g, maps, frozen_z1), fl.eta).total;
          },
          nets.parameters(), h, tol);
    });
  }
  return out;
}

}  // namespace dgstyle
