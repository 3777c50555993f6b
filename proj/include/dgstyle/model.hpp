#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dgstyle/ops.hpp"
#include "dgstyle/rng.hpp"
#include "dgstyle/srm_fl.hpp"
#include "dgstyle/style_ops.hpp"

namespace dgstyle {

inline constexpr std::size_t kStages = 4;
inline constexpr double kBatchNormMomentum = 0.1;

enum class NormKind { instance, batch };

struct BackboneConfig {
  std::array<std::size_t, kStages> stage_channels{8, 16, 32, 64};
  std::size_t blocks_per_stage = 1;
  std::size_t input_size = 64;
  std::size_t input_channels = 1;
  std::size_t num_classes = 5;
  NormKind block_norm = NormKind::instance;
  /// IBN flavor: stages 1-2 use instance norm whatever block_norm says.
  bool use_instance_norm_in_early_stages = false;

  void validate() const {
    if (num_classes == 0) throw DomainError("backbone: num_classes must be >= 1");
    if (blocks_per_stage == 0) throw DomainError("backbone: blocks_per_stage must be >= 1");
    if (input_channels == 0) throw DomainError("backbone: input_channels must be >= 1");
    for (const auto c : stage_channels) {
      if (c == 0) throw DomainError("backbone: stage channel counts must be positive");
    }
    if ((input_size >> (kStages - 1)) == 0) throw DomainError("backbone: input_size too small for 3 downsamples");
  }

  /// stage is 1-based.
  NormKind norm_for_stage(std::size_t stage) const {
    if (use_instance_norm_in_early_stages && stage <= 2) return NormKind::instance;
    return block_norm;
  }

  /// Spatial extent of the feature map leaving `stage` (1-based).
  std::size_t extent_after(std::size_t stage, std::size_t input) const {
    const auto downsamples = std::min(stage, kStages - 1);
    return input >> downsamples;
  }
};

/// conv3x3 (no bias) -> norm -> affine (gamma, beta) -> relu.
template <typename T>
struct Block {
  Tensor<T> conv;   // [out, in, 3, 3]
  Tensor<T> gamma;  // [out]
  Tensor<T> beta;   // [out]
};

template <typename T>
struct ModelParams {
  std::array<std::vector<Block<T>>, kStages> stages;
  Tensor<T> classifier_weight;  // [N, C4]
  Tensor<T> classifier_bias;    // [N]

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t s = 0; s < kStages; ++s) {
      for (std::size_t b = 0; b < stages[s].size(); ++b) {
        const auto prefix = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
        out.emplace_back(prefix + ".conv", stages[s][b].conv);
        out.emplace_back(prefix + ".gamma", stages[s][b].gamma);
        out.emplace_back(prefix + ".beta", stages[s][b].beta);
      }
    }
    out.emplace_back("classifier.weight", classifier_weight);
    out.emplace_back("classifier.bias", classifier_bias);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : parameters()) n += t.size();
    return n;
  }

  /// Deep copy; `trainable` sets requires_grad on every tensor of the copy.
  ModelParams deep_copy(bool trainable) const {
    ModelParams out = *this;
    auto copy = [trainable](Tensor<T>& t) {
      t = t.detach();
      t.set_requires_grad(trainable);
    };
    for (auto& stage : out.stages)
      for (auto& block : stage) {
        copy(block.conv);
        copy(block.gamma);
        copy(block.beta);
      }
    copy(out.classifier_weight);
    copy(out.classifier_bias);
    return out;
  }
};

/// Batch-norm running statistics of one block (empty for instance-norm blocks).
template <typename T>
struct RunningStats {
  std::vector<T> mean;
  std::vector<T> var;
};

template <typename T>
using RunningBuffers = std::array<std::vector<RunningStats<T>>, kStages>;

template <typename T>
struct ModelState {
  BackboneConfig config;
  ModelParams<T> live;
  ModelParams<T> ema;  // same structure as live, never trained directly
  RunningBuffers<T> running;
  std::uint64_t step = 0;
};

/// Closed-form parameter count for a config.
inline std::size_t backbone_parameter_count(const BackboneConfig& cfg) {
  std::size_t n = 0;
  std::size_t in = cfg.input_channels;
  for (std::size_t s = 0; s < kStages; ++s) {
    const auto out = cfg.stage_channels[s];
    for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
      n += in * out * 9 + 2 * out;
      in = out;
    }
  }
  return n + in * cfg.num_classes + cfg.num_classes;
}

/// He-uniform convolutions, unit/zero norm affines, U(+-1/sqrt(C4)) classifier
/// weights with zero bias. The EMA shadow starts equal to the live weights.
template <typename T>
ModelState<T> model_init(const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelState<T> state;
  state.config = cfg;
  std::size_t in = cfg.input_channels;
  for (std::size_t s = 0; s < kStages; ++s) {
    const auto out = cfg.stage_channels[s];
    for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
      const double bound = std::sqrt(6.0 / static_cast<double>(in * 9));
      std::vector<T> w(out * in * 9);
      for (auto& v : w) v = static_cast<T>(uniform(rng, -bound, bound));
      Block<T> block{Tensor<T>({out, in, 3, 3}, std::move(w)), Tensor<T>::full({out}, T{1}),
                     Tensor<T>::zeros({out})};
      block.conv.set_requires_grad(true);
      block.gamma.set_requires_grad(true);
      block.beta.set_requires_grad(true);
      state.live.stages[s].push_back(std::move(block));
      RunningStats<T> rs;
      if (cfg.norm_for_stage(s + 1) == NormKind::batch) {
        rs.mean.assign(out, T{0});
        rs.var.assign(out, T{1});
      }
      state.running[s].push_back(std::move(rs));
      in = out;
    }
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<T> w(cfg.num_classes * in);
  for (auto& v : w) v = static_cast<T>(uniform(rng, -bound, bound));
  state.live.classifier_weight = Tensor<T>({cfg.num_classes, in}, std::move(w));
  state.live.classifier_weight.set_requires_grad(true);
  state.live.classifier_bias = Tensor<T>::zeros({cfg.num_classes});
  state.live.classifier_bias.set_requires_grad(true);
  state.ema = state.live.deep_copy(false);
  return state;
}

/// How normalization layers behave in one forward pass.
template <typename T>
struct ForwardContext {
  bool training = true;
  const RunningBuffers<T>* running = nullptr;  // read in eval mode
  RunningBuffers<T>* update_running = nullptr;  // written in training mode when set
};

template <typename T>
Tensor<T> block_forward(Graph<T>& g, const Block<T>& block, NormKind norm, const Tensor<T>& x,
                        const ForwardContext<T>& ctx, const RunningStats<T>* running, RunningStats<T>* update) {
  const T eps = T(kStyleEpsilon);
  auto h = ops::conv2d(g, x, block.conv, 1, 1);
  if (norm == NormKind::instance) {
    h = ops::standardize(g, h, ops::NormGroup::instance, eps);
  } else if (ctx.training) {
    ops::GroupStats<T> stats;
    h = ops::standardize(g, h, ops::NormGroup::batch, eps, &stats);
    if (update) {
      const T m = T(kBatchNormMomentum);
      for (std::size_t c = 0; c < stats.mean.size(); ++c) {
        update->mean[c] = (T{1} - m) * update->mean[c] + m * stats.mean[c];
        update->var[c] = (T{1} - m) * update->var[c] + m * stats.var[c];
      }
    }
  } else {
    if (!running || running->mean.empty()) throw Error("backbone: batch-norm running statistics missing");
    h = ops::standardize_fixed(g, h, std::span<const T>(running->mean), std::span<const T>(running->var), eps);
  }
  return ops::relu(g, ops::scale_shift(g, h, block.gamma, block.beta));
}

/// Runs stages [from, to] (1-based, inclusive). Stages 1-3 end with a 2x
/// average-pool downsample; stage 4 keeps its map for global pooling.
template <typename T>
Tensor<T> forward_stages(Graph<T>& g, const ModelParams<T>& params, const BackboneConfig& cfg, const Tensor<T>& x,
                         std::size_t from, std::size_t to, const ForwardContext<T>& ctx) {
  if (from < 1 || from > to || to > kStages) {
    throw DomainError("forward_stages: invalid stage range [" + std::to_string(from) + "," + std::to_string(to) +
                      "]");
  }
  Tensor<T> h = x;
  for (std::size_t s = from; s <= to; ++s) {
    const auto norm = cfg.norm_for_stage(s);
    const auto& blocks = params.stages[s - 1];
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const RunningStats<T>* running = ctx.running ? &(*ctx.running)[s - 1][b] : nullptr;
      RunningStats<T>* update = ctx.update_running ? &(*ctx.update_running)[s - 1][b] : nullptr;
      h = block_forward(g, blocks[b], norm, h, ctx, running, update);
    }
    if (s < kStages) h = ops::avg_pool2(g, h);
  }
  return h;
}

template <typename T>
struct Prediction {
  Tensor<T> logits;
  Tensor<T> probs;
};

/// logits = W gap(features) + b, probs = sigmoid(logits).
template <typename T>
Prediction<T> classify(Graph<T>& g, const ModelParams<T>& params, const Tensor<T>& features) {
  if (features.rank() != 4 || features.dim(1) != params.classifier_weight.dim(1)) {
    throw ShapeError("classify: features " + to_string(features.shape()) + " do not match classifier input " +
                     std::to_string(params.classifier_weight.dim(1)));
  }
  const auto pooled = ops::global_avg_pool(g, features);
  auto logits =
      ops::bias_add(g, ops::matmul(g, pooled, ops::transpose(g, params.classifier_weight)), params.classifier_bias);
  auto probs = ops::sigmoid(g, logits);
  return {logits, probs};
}

inline bool is_permutation_of_batch(const std::vector<std::size_t>& pairing, std::size_t batch) {
  if (pairing.size() != batch) return false;
  std::vector<bool> seen(batch, false);
  for (const auto i : pairing) {
    if (i >= batch || seen[i]) return false;
    seen[i] = true;
  }
  return true;
}

/// Inputs retained for the style-net objective: content Z1 and reference Z2
/// (both constants), and the stylized map Z_s whose only trainable ancestors
/// are the style-net parameters.
template <typename T>
struct StyleTriple {
  Tensor<T> content;
  Tensor<T> reference;
  Tensor<T> stylized;
};

template <typename T>
struct DualOutput {
  Tensor<T> features;             // F, clean branch
  Prediction<T> clean;            // p
  Tensor<T> features_stylized;    // F_s
  Prediction<T> stylized;         // p_s
  std::optional<StyleTriple<T>> style_triple;
};

template <typename T>
using StyleMapOverride = std::function<StyleMaps<T>(Graph<T>&, const Tensor<T>& reference)>;

/// How the clean branch runs: recorded (a consistency loss consumes F or p),
/// forward only (it just feeds batch-norm running statistics), or skipped
/// when the stylized branch sees exactly the clean input.
enum class CleanBranch { record, forward_only, skip };

/// Which training-mode forward passes feed batch-norm running statistics.
enum class RunningStatsSource { clean, stylized, both };

template <typename T>
struct DualOptions {
  bool use_srm_fl = true;
  SrmFlConfig srm_fl;
  CleanBranch clean_branch = CleanBranch::record;
  RunningStatsSource running_stats = RunningStatsSource::clean;
  /// Test hook: replaces the style nets' output maps.
  StyleMapOverride<T> style_override;
};

/// Clean branch: F, p over stages 1-4. Stylized branch: Z1 = stages 1..k of
/// the stylized batch, Z2 = Z1 re-indexed by `pairing`, Z_s = SRM-FL(Z1, Z2),
/// then stages k+1..4 give F_s, p_s.
///
/// Gradient partition: the backbone sees Z_s through Z1's normalized branch
/// only (style maps enter as constants); the returned style triple carries a
/// second Z_s computed from constant Z1/Z2 so that L_phi reaches the style
/// nets only. Batch-norm running statistics follow opt.running_stats; a
/// skipped clean branch leaves the stylized one to update them, and F and p
/// then alias F_s and p_s.
template <typename T>
DualOutput<T> forward_dual(Graph<T>& g, ModelState<T>& state, const StyleNets<T>* nets,
                           const Tensor<T>& batch_clean, const Tensor<T>& batch_stylized,
                           const std::vector<std::size_t>& pairing, const DualOptions<T>& opt) {
  const auto& cfg = state.config;
  if (batch_clean.shape() != batch_stylized.shape()) {
    throw ShapeError("forward_dual: clean and stylized batches differ in shape");
  }
  if (!is_permutation_of_batch(pairing, batch_stylized.dim(0))) {
    throw DomainError("forward_dual: pairing is not a permutation of the batch");
  }
  DualOutput<T> out;
  const bool skip_clean = opt.clean_branch == CleanBranch::skip;
  if (skip_clean && opt.use_srm_fl) throw DomainError("forward_dual: clean branch can only be skipped without SRM-FL");
  if (!skip_clean) {
    const bool update = opt.running_stats != RunningStatsSource::stylized;
    ForwardContext<T> ctx{true, nullptr, update ? &state.running : nullptr};
    Graph<T> detached(false);
    Graph<T>& cg = opt.clean_branch == CleanBranch::record ? g : detached;
    out.features = forward_stages(cg, state.live, cfg, batch_clean, 1, kStages, ctx);
    out.clean = classify(cg, state.live, out.features);
  }

  const bool update_stylized = skip_clean || opt.running_stats != RunningStatsSource::clean;
  const ForwardContext<T> ctx{true, nullptr, update_stylized ? &state.running : nullptr};
  const auto k = static_cast<std::size_t>(opt.srm_fl.insertion_stage);
  const auto z1 = forward_stages(g, state.live, cfg, batch_stylized, 1, k, ctx);
  Tensor<T> z_s = z1;
  if (opt.use_srm_fl) {
    const T eps = T(kStyleEpsilon);
    Graph<T> constants(false);
    const auto z1_const = ops::stop_gradient(z1);
    const auto z2_const = ops::gather_batch(constants, z1_const, pairing);
    if (opt.style_override) {
      auto maps = opt.style_override(constants, z2_const);
      z_s = apply_style_maps(g, StyleMaps<T>{maps.gamma.detach(), maps.beta.detach()}, z1, eps);
    } else if (opt.srm_fl.embedding == StyleEmbedding::predefined) {
      z_s = adain(g, z1, z2_const, eps);
    } else {
      if (!nets) throw Error("forward_dual: learnable SRM-FL requested without style nets");
      auto maps = style_nets_forward(g, *nets, z2_const);
      z_s = apply_style_maps(g, StyleMaps<T>{maps.gamma.detach(), maps.beta.detach()}, z1, eps);
      out.style_triple = StyleTriple<T>{z1_const, z2_const, apply_style_maps(g, maps, z1_const, eps)};
    }
  }
  out.features_stylized = k < kStages ? forward_stages(g, state.live, cfg, z_s, k + 1, kStages, ctx) : z_s;
  out.stylized = classify(g, state.live, out.features_stylized);
  if (skip_clean) {
    out.features = out.features_stylized;
    out.clean = out.stylized;
  }
  return out;
}

}  // namespace dgstyle
