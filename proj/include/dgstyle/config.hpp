#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "dgstyle/data.hpp"
#include "dgstyle/losses.hpp"
#include "dgstyle/model.hpp"
#include "dgstyle/optim.hpp"
#include "dgstyle/srm_fl.hpp"
#include "dgstyle/style_ops.hpp"

namespace dgstyle {

enum class Precision { float32, float64 };

struct Toggles {
  bool use_srm_il = true;
  bool use_srm_fl = true;
  bool use_l_ccr = true;
  bool use_l_pdr = true;

  bool any_consistency() const { return use_l_ccr || use_l_pdr; }
  bool operator==(const Toggles&) const = default;
};

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 16;
  std::size_t grad_accum_steps = 4;
  std::size_t epochs = 10;
  /// Caps the number of optimizer steps (0: run all epochs).
  std::size_t max_steps = 0;
  double ema_decay = 0.997;
  FocalConfig focal;
  ConsistencyReduction ccr_reduction = ConsistencyReduction::instance_sum;
  SrmIlConfig srm_il;
  SrmFlConfig srm_fl;
  Toggles toggles;
  BackboneConfig backbone;
  RunningStatsSource bn_running_stats = RunningStatsSource::clean;
  PreprocessConfig preprocess;
  Precision precision = Precision::float32;
  std::uint64_t seed = 0;

  void validate() const {
    adam.validate();
    if (batch_size == 0) throw DomainError("train: batch_size must be >= 1");
    if (grad_accum_steps == 0) throw DomainError("train: grad_accum_steps must be >= 1");
    if (epochs == 0) throw DomainError("train: epochs must be >= 1");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw DomainError("train: ema_decay must lie in [0,1]");
    if (!(focal.alpha_t >= 0.0 && focal.alpha_t <= 1.0) || !(focal.gamma_prime >= 0.0)) {
      throw DomainError("train: focal alpha_t must lie in [0,1] and gamma' be non-negative");
    }
    srm_il.validate();
    srm_fl.validate();
    backbone.validate();
    preprocess.validate();
    if (preprocess.crop_to != backbone.input_size) {
      throw DomainError("train: preprocess.crop_to must equal backbone.input_size");
    }
    if (toggles.use_srm_fl && srm_fl.embedding == StyleEmbedding::learnable) {
      const auto k = static_cast<std::size_t>(srm_fl.insertion_stage);
      style_net_channels(backbone.stage_channels[k - 1], srm_fl.reduction);
    }
  }
};

// Like NLOHMANN_JSON_SERIALIZE_ENUM, but unknown names are errors instead of
// silently mapping to the first enumerator.
#define DGSTYLE_STRICT_ENUM(ENUM_TYPE, ...)                                                      \
  inline void to_json(nlohmann::json& j, const ENUM_TYPE& e) {                                   \
    static const std::pair<ENUM_TYPE, const char*> m[] = __VA_ARGS__;                            \
    for (const auto& [v, name] : m)                                                              \
      if (v == e) {                                                                              \
        j = name;                                                                                \
        return;                                                                                  \
      }                                                                                          \
    throw DomainError("config: unnamed " #ENUM_TYPE " value");                                  \
  }                                                                                              \
  inline void from_json(const nlohmann::json& j, ENUM_TYPE& e) {                                 \
    static const std::pair<ENUM_TYPE, const char*> m[] = __VA_ARGS__;                            \
    if (!j.is_string()) throw DomainError("config: " #ENUM_TYPE " must be a string");           \
    const auto text = j.get<std::string>();                                                      \
    for (const auto& [v, name] : m)                                                              \
      if (text == name) {                                                                        \
        e = v;                                                                                   \
        return;                                                                                  \
      }                                                                                          \
    throw DomainError("config: unknown " #ENUM_TYPE " '" + text + "'");                         \
  }

DGSTYLE_STRICT_ENUM(Precision, {{Precision::float32, "float32"}, {Precision::float64, "float64"}})
DGSTYLE_STRICT_ENUM(ConsistencyReduction, {{ConsistencyReduction::instance_sum, "instance_sum"},
                                                    {ConsistencyReduction::element_mean, "element_mean"}})
DGSTYLE_STRICT_ENUM(RunningStatsSource, {{RunningStatsSource::clean, "clean"},
                                                  {RunningStatsSource::stylized, "stylized"},
                                                  {RunningStatsSource::both, "both"}})
DGSTYLE_STRICT_ENUM(NormKind, {{NormKind::instance, "instance"}, {NormKind::batch, "batch"}})
DGSTYLE_STRICT_ENUM(InsertionStage, {{InsertionStage::after_stage_1, "after_stage_1"},
                                              {InsertionStage::after_stage_2, "after_stage_2"},
                                              {InsertionStage::after_stage_3, "after_stage_3"}})
DGSTYLE_STRICT_ENUM(StyleEmbedding,
                             {{StyleEmbedding::learnable, "learnable"}, {StyleEmbedding::predefined, "predefined"}})
DGSTYLE_STRICT_ENUM(StyleNetVariant, {{StyleNetVariant::conv_only, "conv_only"},
                                               {StyleNetVariant::conv_relu, "conv_relu"},
                                               {StyleNetVariant::conv_bn, "conv_bn"}})

#undef DGSTYLE_STRICT_ENUM

namespace detail {

// Reads key `k` into `v` when present; unknown keys are rejected so that
// misspelt options fail loudly instead of silently falling back to defaults.
template <typename V>
void read_opt(const nlohmann::json& j, const char* k, V& v) {
  if (j.contains(k)) v = j.at(k).get<V>();
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw DomainError("config: '" + where + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw DomainError("config: unknown key '" + key + "' in '" + where + "'");
  }
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const AdamConfig& c) {
  j = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}
inline void from_json(const nlohmann::json& j, AdamConfig& c) {
  detail::reject_unknown(j, {"lr", "beta1", "beta2", "eps"}, "adam");
  detail::read_opt(j, "lr", c.lr);
  detail::read_opt(j, "beta1", c.beta1);
  detail::read_opt(j, "beta2", c.beta2);
  detail::read_opt(j, "eps", c.eps);
}

inline void to_json(nlohmann::json& j, const FocalConfig& c) {
  j = {{"alpha_t", c.alpha_t}, {"gamma_prime", c.gamma_prime}};
}
inline void from_json(const nlohmann::json& j, FocalConfig& c) {
  detail::reject_unknown(j, {"alpha_t", "gamma_prime"}, "focal");
  detail::read_opt(j, "alpha_t", c.alpha_t);
  detail::read_opt(j, "gamma_prime", c.gamma_prime);
}

inline void to_json(nlohmann::json& j, const SrmIlConfig& c) {
  j = {{"x_min", c.x_min}, {"x_max", c.x_max}, {"sigma_floor", c.sigma_floor}, {"rng_seed", c.rng_seed}};
}
inline void from_json(const nlohmann::json& j, SrmIlConfig& c) {
  detail::reject_unknown(j, {"x_min", "x_max", "sigma_floor", "rng_seed"}, "srm_il");
  detail::read_opt(j, "x_min", c.x_min);
  detail::read_opt(j, "x_max", c.x_max);
  detail::read_opt(j, "sigma_floor", c.sigma_floor);
  detail::read_opt(j, "rng_seed", c.rng_seed);
}

inline void to_json(nlohmann::json& j, const SrmFlConfig& c) {
  j = {{"eta", c.eta},
       {"reduction", c.reduction},
       {"insertion_stage", c.insertion_stage},
       {"embedding", c.embedding},
       {"variant", c.variant}};
}
inline void from_json(const nlohmann::json& j, SrmFlConfig& c) {
  detail::reject_unknown(j, {"eta", "reduction", "insertion_stage", "embedding", "variant"}, "srm_fl");
  detail::read_opt(j, "eta", c.eta);
  detail::read_opt(j, "reduction", c.reduction);
  detail::read_opt(j, "insertion_stage", c.insertion_stage);
  detail::read_opt(j, "embedding", c.embedding);
  detail::read_opt(j, "variant", c.variant);
}

inline void to_json(nlohmann::json& j, const Toggles& c) {
  j = {{"use_srm_il", c.use_srm_il}, {"use_srm_fl", c.use_srm_fl}, {"use_l_ccr", c.use_l_ccr}, {"use_l_pdr", c.use_l_pdr}};
}
inline void from_json(const nlohmann::json& j, Toggles& c) {
  detail::reject_unknown(j, {"use_srm_il", "use_srm_fl", "use_l_ccr", "use_l_pdr"}, "toggles");
  detail::read_opt(j, "use_srm_il", c.use_srm_il);
  detail::read_opt(j, "use_srm_fl", c.use_srm_fl);
  detail::read_opt(j, "use_l_ccr", c.use_l_ccr);
  detail::read_opt(j, "use_l_pdr", c.use_l_pdr);
}

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"stage_channels", c.stage_channels},
       {"blocks_per_stage", c.blocks_per_stage},
       {"input_size", c.input_size},
       {"input_channels", c.input_channels},
       {"num_classes", c.num_classes},
       {"block_norm", c.block_norm},
       {"use_instance_norm_in_early_stages", c.use_instance_norm_in_early_stages}};
}
inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
  detail::reject_unknown(j,
                         {"stage_channels", "blocks_per_stage", "input_size", "input_channels", "num_classes",
                          "block_norm", "use_instance_norm_in_early_stages"},
                         "backbone");
  detail::read_opt(j, "stage_channels", c.stage_channels);
  detail::read_opt(j, "blocks_per_stage", c.blocks_per_stage);
  detail::read_opt(j, "input_size", c.input_size);
  detail::read_opt(j, "input_channels", c.input_channels);
  detail::read_opt(j, "num_classes", c.num_classes);
  detail::read_opt(j, "block_norm", c.block_norm);
  detail::read_opt(j, "use_instance_norm_in_early_stages", c.use_instance_norm_in_early_stages);
}

inline void to_json(nlohmann::json& j, const PreprocessConfig& c) {
  j = {{"resize_to", c.resize_to},
       {"crop_to", c.crop_to},
       {"hflip_prob", c.hflip_prob},
       {"normalize_mean", c.normalize_mean},
       {"normalize_std", c.normalize_std}};
}
inline void from_json(const nlohmann::json& j, PreprocessConfig& c) {
  detail::reject_unknown(j, {"resize_to", "crop_to", "hflip_prob", "normalize_mean", "normalize_std"}, "preprocess");
  detail::read_opt(j, "resize_to", c.resize_to);
  detail::read_opt(j, "crop_to", c.crop_to);
  detail::read_opt(j, "hflip_prob", c.hflip_prob);
  detail::read_opt(j, "normalize_mean", c.normalize_mean);
  detail::read_opt(j, "normalize_std", c.normalize_std);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"adam", c.adam},
       {"batch_size", c.batch_size},
       {"grad_accum_steps", c.grad_accum_steps},
       {"epochs", c.epochs},
       {"max_steps", c.max_steps},
       {"ema_decay", c.ema_decay},
       {"focal", c.focal},
       {"ccr_reduction", c.ccr_reduction},
       {"srm_il", c.srm_il},
       {"srm_fl", c.srm_fl},
       {"toggles", c.toggles},
       {"backbone", c.backbone},
       {"bn_running_stats", c.bn_running_stats},
       {"preprocess", c.preprocess},
       {"precision", c.precision},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  detail::reject_unknown(j,
                         {"adam", "batch_size", "grad_accum_steps", "epochs", "max_steps", "ema_decay", "focal",
                          "ccr_reduction", "srm_il", "srm_fl", "toggles", "backbone", "bn_running_stats", "preprocess", "precision", "seed"},
                         "config");
  detail::read_opt(j, "adam", c.adam);
  detail::read_opt(j, "batch_size", c.batch_size);
  detail::read_opt(j, "grad_accum_steps", c.grad_accum_steps);
  detail::read_opt(j, "epochs", c.epochs);
  detail::read_opt(j, "max_steps", c.max_steps);
  detail::read_opt(j, "ema_decay", c.ema_decay);
  detail::read_opt(j, "focal", c.focal);
  detail::read_opt(j, "ccr_reduction", c.ccr_reduction);
  detail::read_opt(j, "srm_il", c.srm_il);
  detail::read_opt(j, "srm_fl", c.srm_fl);
  detail::read_opt(j, "toggles", c.toggles);
  detail::read_opt(j, "backbone", c.backbone);
  detail::read_opt(j, "bn_running_stats", c.bn_running_stats);
  detail::read_opt(j, "preprocess", c.preprocess);
  detail::read_opt(j, "precision", c.precision);
  detail::read_opt(j, "seed", c.seed);
}

// Intervals serialize as [lo, hi].
inline void to_json(nlohmann::json& j, const Interval& c) { j = nlohmann::json::array({c.lo, c.hi}); }
inline void from_json(const nlohmann::json& j, Interval& c) {
  if (!j.is_array() || j.size() != 2) throw DomainError("config: interval must be [lo, hi]");
  c.lo = j[0].get<double>();
  c.hi = j[1].get<double>();
}

inline void to_json(nlohmann::json& j, const DomainSpec& c) {
  j = {{"domain_id", c.domain_id},
       {"gamma", c.gamma},
       {"contrast", c.contrast},
       {"brightness_offset", c.brightness_offset},
       {"lowfreq_field_amplitude", c.lowfreq_field_amplitude},
       {"noise_std", c.noise_std}};
}
inline void from_json(const nlohmann::json& j, DomainSpec& c) {
  detail::reject_unknown(
      j, {"domain_id", "gamma", "contrast", "brightness_offset", "lowfreq_field_amplitude", "noise_std"}, "domains");
  detail::read_opt(j, "domain_id", c.domain_id);
  detail::read_opt(j, "gamma", c.gamma);
  detail::read_opt(j, "contrast", c.contrast);
  detail::read_opt(j, "brightness_offset", c.brightness_offset);
  detail::read_opt(j, "lowfreq_field_amplitude", c.lowfreq_field_amplitude);
  detail::read_opt(j, "noise_std", c.noise_std);
}

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"num_classes", c.num_classes},
       {"image_size", c.image_size},
       {"class_probability", c.class_probability},
       {"seed", c.seed},
       {"domains", c.domains},
       {"per_domain_count", c.per_domain_count},
       {"train_domains", c.train_domains},
       {"max_placement_retries", c.max_placement_retries},
       {"threads", c.threads}};
}
inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  detail::reject_unknown(j,
                         {"num_classes", "image_size", "class_probability", "seed", "domains", "per_domain_count",
                          "train_domains", "max_placement_retries", "threads"},
                         "generator");
  detail::read_opt(j, "num_classes", c.num_classes);
  detail::read_opt(j, "image_size", c.image_size);
  detail::read_opt(j, "class_probability", c.class_probability);
  detail::read_opt(j, "seed", c.seed);
  detail::read_opt(j, "domains", c.domains);
  detail::read_opt(j, "per_domain_count", c.per_domain_count);
  detail::read_opt(j, "train_domains", c.train_domains);
  detail::read_opt(j, "max_placement_retries", c.max_placement_retries);
  detail::read_opt(j, "threads", c.threads);
  c.validate();
}

/// Overlays `patch` onto `base` (RFC 7386 merge) and parses the result.
inline TrainConfig merge_config(const TrainConfig& base, const nlohmann::json& patch) {
  nlohmann::json j = base;
  j.merge_patch(patch);
  return j.get<TrainConfig>();
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open " + path.string());
  try {
    return merge_config(TrainConfig{}, nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("config: " + path.string() + ": " + e.what());
  }
}

inline void save_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string());
  os << j.dump(2) << '\n';
}

/// FNV-1a of the canonical (key-sorted, compact) JSON form, as 16 hex digits.
inline std::string config_hash(const TrainConfig& cfg) {
  const auto text = nlohmann::json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dgstyle
