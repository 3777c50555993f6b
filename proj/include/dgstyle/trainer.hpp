#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgstyle/checkpoint.hpp"
#include "dgstyle/config.hpp"
#include "dgstyle/data.hpp"
#include "dgstyle/losses.hpp"
#include "dgstyle/metrics.hpp"
#include "dgstyle/model.hpp"
#include "dgstyle/optim.hpp"
#include "dgstyle/srm_fl.hpp"

namespace dgstyle {

/// Named RNG streams of one training run. Each consumer owns its stream so
/// that switching a component on or off never shifts the draws of another.
struct TrainStreams {
  Rng init;
  Rng style_nets;
  Rng shuffle;
  Rng augment;
  Rng srm_il;
  Rng pairing;

  explicit TrainStreams(const TrainConfig& cfg)
      : init(make_rng(cfg.seed, "init")),
        style_nets(make_rng(cfg.seed, "style_nets")),
        shuffle(make_rng(cfg.seed, "shuffle")),
        augment(make_rng(cfg.seed, "augment")),
        srm_il(make_rng(derive_seed(cfg.seed, cfg.srm_il.rng_seed), "srm_il")),
        pairing(make_rng(cfg.seed, "pairing")) {}
};

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ShapeError("stack: empty list");
  Shape shape{items.size()};
  for (const auto d : items.front().shape()) shape.push_back(d);
  std::vector<T> out;
  out.reserve(numel(shape));
  for (const auto& t : items) {
    if (t.shape() != items.front().shape()) throw ShapeError("stack: items differ in shape");
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return Tensor<T>(std::move(shape), std::move(out));
}

template <typename T>
Tensor<T> label_tensor(const DatasetManifest& manifest, const std::vector<std::size_t>& indices) {
  const auto n = manifest.num_classes();
  std::vector<T> out;
  out.reserve(indices.size() * n);
  for (const auto i : indices)
    for (const int l : manifest.records.at(i).labels) out.push_back(static_cast<T>(l));
  return Tensor<T>({indices.size(), n}, std::move(out));
}

template <typename T>
struct Batch {
  Tensor<T> clean;     // [B,1,H,W], normalized
  Tensor<T> stylized;  // [B,1,H,W], SRM-IL output normalized the same way (or the clean batch)
  Tensor<T> labels;    // [B,N]
};

/// preprocess (train mode) -> SRM-IL on the raw scale -> normalization.
template <typename T>
Batch<T> make_train_batch(const DatasetManifest& manifest, const ImageStore& store, const std::vector<std::size_t>& idx,
                          const TrainConfig& cfg, Rng& augment, Rng& srm_il_rng) {
  std::vector<Tensor<T>> clean, stylized;
  for (const auto i : idx) {
    auto pre = preprocess<T>(store.images.at(i), cfg.preprocess, Mode::train, augment);
    clean.push_back(pre.normalized);
    if (cfg.toggles.use_srm_il) {
      const auto restyled = srm_il(pre.raw, cfg.srm_il, srm_il_rng);
      stylized.push_back(normalize_intensity(restyled.image, cfg.preprocess.normalize_mean, cfg.preprocess.normalize_std));
    }
  }
  Batch<T> b{stack(clean), Tensor<T>(), label_tensor<T>(manifest, idx)};
  b.stylized = cfg.toggles.use_srm_il ? stack(stylized) : b.clean;
  return b;
}

template <typename T>
struct Objective {
  Tensor<T> l_cls;
  std::optional<Tensor<T>> l_ccr;
  std::optional<Tensor<T>> l_pdr;
  Tensor<T> l_total;
  std::optional<Tensor<T>> l_phi;
  LossBundle values;
};

inline CleanBranch clean_branch_mode(const Toggles& t) {
  if (t.any_consistency()) return CleanBranch::record;
  if (!t.use_srm_il && !t.use_srm_fl) return CleanBranch::skip;
  return CleanBranch::forward_only;
}

/// Builds L_total = L_cls(p_s) + (L_ccr + L_pdr)/2 and, with learnable
/// SRM-FL, the style-net objective L_phi. Disabled terms count as zero.
template <typename T>
Objective<T> dual_objective(Graph<T>& g, ModelState<T>& state, const StyleNets<T>* nets, const Batch<T>& batch,
                            const std::vector<std::size_t>& pairing, const TrainConfig& cfg) {
  DualOptions<T> opt;
  opt.use_srm_fl = cfg.toggles.use_srm_fl;
  opt.srm_fl = cfg.srm_fl;
  opt.clean_branch = clean_branch_mode(cfg.toggles);
  opt.running_stats = cfg.bn_running_stats;
  const auto out = forward_dual(g, state, nets, batch.clean, batch.stylized, pairing, opt);

  Objective<T> obj;
  obj.l_cls = focal_loss(g, out.stylized.probs, batch.labels, cfg.focal);
  Tensor<T> cons = Tensor<T>::scalar(T{0});
  double ccr = 0.0, pdr = 0.0, phi = 0.0;
  if (cfg.toggles.use_l_ccr) {
    obj.l_ccr = content_consistency(g, out.features_stylized, out.features, cfg.ccr_reduction);
    ccr = static_cast<double>(obj.l_ccr->item());
    cons = ops::add(g, cons, *obj.l_ccr);
  }
  if (cfg.toggles.use_l_pdr) {
    obj.l_pdr = pdr_loss(g, out.stylized.probs, out.clean.probs);
    pdr = static_cast<double>(obj.l_pdr->item());
    cons = ops::add(g, cons, *obj.l_pdr);
  }
  obj.l_total = cfg.toggles.any_consistency() ? ops::add(g, obj.l_cls, ops::mul(g, cons, T(0.5))) : obj.l_cls;
  if (out.style_triple) {
    const auto& s = *out.style_triple;
    obj.l_phi = style_net_loss(g, s.content, s.reference, s.stylized, cfg.srm_fl.eta).total;
    phi = static_cast<double>(obj.l_phi->item());
  }
  obj.values = combine(static_cast<double>(obj.l_cls.item()), ccr, pdr, phi);
  return obj;
}

struct StepLog {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  LossBundle losses;  // mean over the step's micro-batches
};

struct TrainLog {
  std::vector<StepLog> steps;
  std::vector<LossBundle> epoch_means;
  bool aborted = false;
  std::string abort_reason;
};

template <typename T>
struct TrainResult {
  TrainConfig config;  // resolved: normalization statistics filled in
  ModelState<T> state;
  std::optional<StyleNets<T>> nets;
  TrainLog log;
};

struct TrainOptions {
  std::function<void(const StepLog&)> on_step;
  /// Written with the last good state if training aborts on a non-finite value.
  std::optional<std::filesystem::path> abort_checkpoint;
};

/// Fills corpus normalization statistics when the config leaves them unset.
inline TrainConfig resolve_config(TrainConfig cfg, const ImageStore& train_images) {
  if (!cfg.preprocess.has_normalization()) {
    const auto [mean, std] = corpus_intensity_stats(train_images);
    cfg.preprocess.normalize_mean = mean;
    cfg.preprocess.normalize_std = std;
  }
  cfg.validate();
  return cfg;
}

inline void accumulate(LossBundle& acc, const LossBundle& v, double w) {
  acc.l_cls += w * v.l_cls;
  acc.l_ccr += w * v.l_ccr;
  acc.l_pdr += w * v.l_pdr;
  acc.l_cons += w * v.l_cons;
  acc.l_total += w * v.l_total;
  acc.l_phi += w * v.l_phi;
}

/// Dual-branch training. Each optimizer step accumulates grad_accum_steps
/// micro-batches of batch_size, each scaled by 1/grad_accum_steps, then takes
/// one Adam step over two groups (backbone+classifier, style nets) and one
/// EMA update. Micro-batches walk a fresh shuffle every epoch; a trailing
/// partial step is dropped.
template <typename T>
TrainResult<T> train(const TrainConfig& config, const DatasetManifest& manifest, const ImageStore& store,
                     const TrainOptions& options = {}) {
  if (manifest.records.empty()) throw DomainError("train: empty manifest");
  if (store.images.size() != manifest.records.size()) throw DomainError("train: image store does not match manifest");
  if (manifest.num_classes() != config.backbone.num_classes) {
    throw DomainError("train: manifest has " + std::to_string(manifest.num_classes()) + " classes, backbone expects " +
                      std::to_string(config.backbone.num_classes));
  }
  TrainResult<T> result;
  result.config = resolve_config(config, store);
  const auto& cfg = result.config;
  TrainStreams rs(cfg);
  result.state = model_init<T>(cfg.backbone, rs.init);
  auto& state = result.state;
  const bool learnable_fl = cfg.toggles.use_srm_fl && cfg.srm_fl.embedding == StyleEmbedding::learnable;
  if (learnable_fl) {
    const auto k = static_cast<std::size_t>(cfg.srm_fl.insertion_stage);
    result.nets = style_nets_init<T>(cfg.backbone.stage_channels[k - 1], cfg.srm_fl.reduction, rs.style_nets, false,
                                     cfg.srm_fl.variant);
  }
  const StyleNets<T>* nets = result.nets ? &*result.nets : nullptr;

  Adam<T> adam(cfg.adam);
  adam.add_group("backbone", state.live.parameters());
  if (nets) adam.add_group("style_nets", nets->parameters());

  const auto n = manifest.records.size();
  const auto micro_per_epoch = n / cfg.batch_size;
  const auto steps_per_epoch = micro_per_epoch / cfg.grad_accum_steps;
  if (steps_per_epoch == 0) throw DomainError("train: dataset smaller than one optimizer step");
  const T inv_accum = T(1.0 / static_cast<double>(cfg.grad_accum_steps));

  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, rs.shuffle);
    LossBundle epoch_acc;
    std::size_t epoch_steps = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      if (cfg.max_steps && state.step >= cfg.max_steps) break;
      StepLog log{state.step + 1, epoch, {}};
      try {
        adam.zero_grad();
        for (std::size_t m = 0; m < cfg.grad_accum_steps; ++m) {
          const auto offset = (s * cfg.grad_accum_steps + m) * cfg.batch_size;
          const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(offset),
                                             order.begin() + static_cast<std::ptrdiff_t>(offset + cfg.batch_size));
          const auto batch = make_train_batch<T>(manifest, store, idx, cfg, rs.augment, rs.srm_il);
          std::vector<std::size_t> pairing(cfg.batch_size);
          std::iota(pairing.begin(), pairing.end(), std::size_t{0});
          if (cfg.toggles.use_srm_fl) shuffle(pairing, rs.pairing);

          Graph<T> g;
          const auto obj = dual_objective(g, state, nets, batch, pairing, cfg);
          auto total = obj.l_phi ? ops::add(g, obj.l_total, *obj.l_phi) : obj.l_total;
          g.backward(ops::mul(g, total, inv_accum));
          accumulate(log.losses, obj.values, 1.0 / static_cast<double>(cfg.grad_accum_steps));
        }
        adam.step();
      } catch (const NonFiniteError& e) {
        result.log.aborted = true;
        result.log.abort_reason = "step " + std::to_string(log.step) + ": " + e.what();
        adam.zero_grad();
        if (options.abort_checkpoint) save_checkpoint<T>(*options.abort_checkpoint, cfg, state, nets);
        return result;
      }
      ema_update(state, cfg.ema_decay);
      ++state.step;
      accumulate(epoch_acc, log.losses, 1.0);
      ++epoch_steps;
      result.log.steps.push_back(log);
      if (options.on_step) options.on_step(log);
    }
    if (epoch_steps == 0) break;
    LossBundle mean;
    accumulate(mean, epoch_acc, 1.0 / static_cast<double>(epoch_steps));
    result.log.epoch_means.push_back(mean);
  }
  adam.zero_grad();
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Eval-mode forward (running statistics, no SRM) of the chosen weights;
/// returns per-sample class probabilities.
template <typename T>
std::vector<std::vector<double>> predict(const ModelState<T>& state, bool use_ema, const DatasetManifest& manifest,
                                         const ImageStore& store, const PreprocessConfig& pre,
                                         std::size_t batch_size = 32) {
  if (store.images.size() != manifest.records.size()) throw DomainError("predict: image store does not match manifest");
  const auto& params = use_ema ? state.ema : state.live;
  const ForwardContext<T> ctx{false, &state.running, nullptr};
  Rng unused(0);
  std::vector<std::vector<double>> out;
  for (std::size_t begin = 0; begin < manifest.records.size(); begin += batch_size) {
    const auto end = std::min(begin + batch_size, manifest.records.size());
    std::vector<Tensor<T>> xs;
    for (std::size_t i = begin; i < end; ++i) xs.push_back(preprocess<T>(store.images[i], pre, Mode::eval, unused).normalized);
    Graph<T> g(false);
    const auto features = forward_stages(g, params, state.config, stack(xs), 1, kStages, ctx);
    const auto probs = classify(g, params, features).probs;
    const auto N = probs.dim(1);
    for (std::size_t b = 0; b < end - begin; ++b) {
      std::vector<double> row(N);
      for (std::size_t c = 0; c < N; ++c) row[c] = static_cast<double>(probs[b * N + c]);
      out.push_back(std::move(row));
    }
  }
  return out;
}

struct DomainMetrics {
  std::string name;  // "domain_<id>" or "all"
  std::size_t count = 0;
  std::vector<std::optional<double>> per_class;
  std::optional<double> macro;          // mean over evaluable classes
  std::vector<std::size_t> excluded;    // classes with a single label value
};

struct MetricsReport {
  std::vector<DomainMetrics> domains;  // one per domain, then the pooled "all"
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string weights = "ema";
  std::vector<LossBundle> loss_curve;  // epoch means, when known

  const DomainMetrics* find(const std::string& name) const {
    for (const auto& d : domains)
      if (d.name == name) return &d;
    return nullptr;
  }
};

inline DomainMetrics domain_metrics(std::string name, const std::vector<std::vector<double>>& probs,
                                    const std::vector<std::vector<int>>& labels) {
  DomainMetrics m;
  m.name = std::move(name);
  m.count = probs.size();
  const auto N = labels.empty() ? 0 : labels.front().size();
  double sum = 0.0;
  std::size_t evaluable = 0;
  for (std::size_t c = 0; c < N; ++c) {
    std::vector<double> s(probs.size());
    std::vector<int> y(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      s[i] = probs[i][c];
      y[i] = labels[i][c];
    }
    const auto auc = roc_auc(s, y);
    m.per_class.push_back(auc);
    if (auc) {
      sum += *auc;
      ++evaluable;
    } else {
      m.excluded.push_back(c);
    }
  }
  if (evaluable) m.macro = sum / static_cast<double>(evaluable);
  return m;
}

/// Per-domain and pooled per-class ROC-AUC of the EMA (or live) weights.
template <typename T>
MetricsReport evaluate(const ModelState<T>& state, const TrainConfig& cfg, const DatasetManifest& manifest,
                       const ImageStore& store, bool use_ema = true) {
  const auto probs = predict(state, use_ema, manifest, store, cfg.preprocess);
  MetricsReport rep;
  rep.config_hash = config_hash(cfg);
  rep.seed = cfg.seed;
  rep.weights = use_ema ? "ema" : "live";
  std::map<int, std::pair<std::vector<std::vector<double>>, std::vector<std::vector<int>>>> by_domain;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    auto& [p, y] = by_domain[manifest.records[i].domain];
    p.push_back(probs[i]);
    y.push_back(manifest.records[i].labels);
  }
  for (const auto& [id, py] : by_domain) rep.domains.push_back(domain_metrics("domain_" + std::to_string(id), py.first, py.second));
  rep.domains.push_back(domain_metrics("all", probs, manifest.label_matrix()));
  return rep;
}

inline nlohmann::json to_json(const MetricsReport& rep) {
  nlohmann::json j;
  j["config_hash"] = rep.config_hash;
  j["seed"] = rep.seed;
  j["weights"] = rep.weights;
  j["macro_average"] = "mean of per-class AUC over classes with both labels present in the domain";
  j["domains"] = nlohmann::json::array();
  for (const auto& d : rep.domains) {
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& a : d.per_class) per_class.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
    j["domains"].push_back({{"name", d.name},
                            {"count", d.count},
                            {"per_class_auc", per_class},
                            {"macro_auc", d.macro ? nlohmann::json(*d.macro) : nlohmann::json(nullptr)},
                            {"excluded_classes", d.excluded}});
  }
  j["loss_curve"] = nlohmann::json::array();
  for (const auto& l : rep.loss_curve) {
    j["loss_curve"].push_back({{"l_cls", l.l_cls},
                               {"l_ccr", l.l_ccr},
                               {"l_pdr", l.l_pdr},
                               {"l_cons", l.l_cons},
                               {"l_total", l.l_total},
                               {"l_phi", l.l_phi}});
  }
  return j;
}

inline void write_metrics_csv(const MetricsReport& rep, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("metrics: cannot open " + path.string());
  os.precision(10);
  os << "domain,class,auc\n";
  for (const auto& d : rep.domains) {
    for (std::size_t c = 0; c < d.per_class.size(); ++c) {
      os << d.name << ',' << c << ',';
      if (d.per_class[c]) os << *d.per_class[c];
      os << '\n';
    }
    os << d.name << ",macro,";
    if (d.macro) os << *d.macro;
    os << '\n';
  }
}

inline void write_loss_log(const TrainLog& log, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("train: cannot open " + path.string());
  os.precision(10);
  os << "step,epoch,l_cls,l_ccr,l_pdr,l_cons,l_total,l_phi\n";
  for (const auto& s : log.steps) {
    const auto& l = s.losses;
    os << s.step << ',' << s.epoch << ',' << l.l_cls << ',' << l.l_ccr << ',' << l.l_pdr << ',' << l.l_cons << ','
       << l.l_total << ',' << l.l_phi << '\n';
  }
}

}  // namespace dgstyle
