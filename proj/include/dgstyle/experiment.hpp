#pragma once

#include <chrono>
#include <cmath>
#include <exception>
#include <functional>
#include <iomanip>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgstyle/config.hpp"
#include "dgstyle/data.hpp"
#include "dgstyle/metrics.hpp"
#include "dgstyle/trainer.hpp"

namespace dgstyle {

struct ExperimentRow {
  std::string name;
  TrainConfig config;
};

inline TrainConfig with_toggles(TrainConfig cfg, bool il, bool fl, bool ccr, bool pdr) {
  cfg.toggles = Toggles{il, fl, ccr, pdr};
  return cfg;
}

/// Component ablation: base, +SRM-IL, +SRM-IL+SRM-FL, +SRM-FL, +SRM-IL+L_cons,
/// and the full method.
inline std::vector<ExperimentRow> component_rows(const TrainConfig& base) {
  return {{"i_base", with_toggles(base, false, false, false, false)},
          {"ii_srm_il", with_toggles(base, true, false, false, false)},
          {"iii_srm_il_srm_fl", with_toggles(base, true, true, false, false)},
          {"iv_srm_fl", with_toggles(base, false, true, false, false)},
          {"v_srm_il_cons", with_toggles(base, true, false, true, true)},
          {"vi_full", with_toggles(base, true, true, true, true)}};
}

/// Consistency-loss ablation on top of SRM-IL + SRM-FL.
inline std::vector<ExperimentRow> consistency_rows(const TrainConfig& base) {
  return {{"none", with_toggles(base, true, true, false, false)},
          {"pdr", with_toggles(base, true, true, false, true)},
          {"ccr", with_toggles(base, true, true, true, false)},
          {"ccr_pdr", with_toggles(base, true, true, true, true)}};
}

inline std::vector<ExperimentRow> stage_rows(const TrainConfig& base) {
  std::vector<ExperimentRow> rows;
  for (const auto stage : {InsertionStage::after_stage_1, InsertionStage::after_stage_2, InsertionStage::after_stage_3}) {
    auto cfg = with_toggles(base, true, true, true, true);
    cfg.srm_fl.insertion_stage = stage;
    rows.push_back({"stage_" + std::to_string(static_cast<int>(stage)), cfg});
  }
  return rows;
}

inline std::vector<ExperimentRow> embedding_rows(const TrainConfig& base) {
  auto learnable = with_toggles(base, true, true, true, true);
  learnable.srm_fl.embedding = StyleEmbedding::learnable;
  auto predefined = learnable;
  predefined.srm_fl.embedding = StyleEmbedding::predefined;
  return {{"learnable", learnable}, {"predefined", predefined}};
}

inline std::vector<ExperimentRow> architecture_rows(const TrainConfig& base) {
  std::vector<ExperimentRow> rows;
  const std::pair<const char*, StyleNetVariant> variants[] = {
      {"conv", StyleNetVariant::conv_only}, {"conv_relu", StyleNetVariant::conv_relu}, {"conv_bn", StyleNetVariant::conv_bn}};
  for (const auto& [name, v] : variants) {
    auto cfg = with_toggles(base, true, true, true, true);
    cfg.srm_fl.variant = v;
    rows.push_back({name, cfg});
  }
  return rows;
}

inline std::vector<ExperimentRow> eta_rows(const TrainConfig& base, const std::vector<double>& etas) {
  std::vector<ExperimentRow> rows;
  for (const double eta : etas) {
    auto cfg = with_toggles(base, true, true, true, true);
    cfg.srm_fl.eta = eta;
    std::ostringstream name;
    name << "eta_" << eta;
    rows.push_back({name.str(), cfg});
  }
  return rows;
}

inline std::vector<ExperimentRow> sweep_rows(const std::string& sweep, const TrainConfig& base,
                                             const std::vector<double>& etas = {0.001, 0.01, 0.1, 1.0}) {
  if (sweep == "components") return component_rows(base);
  if (sweep == "consistency") return consistency_rows(base);
  if (sweep == "stage") return stage_rows(base);
  if (sweep == "embedding") return embedding_rows(base);
  if (sweep == "architecture") return architecture_rows(base);
  if (sweep == "eta") return eta_rows(base, etas);
  throw DomainError("unknown sweep '" + sweep + "'");
}

/// Source-domain training data, optional held-out in-distribution split, and
/// the unseen-domain evaluation set, with decoded images.
struct BenchmarkSplit {
  DatasetManifest train;
  ImageStore train_images;
  std::optional<DatasetManifest> id_test;
  std::optional<ImageStore> id_test_images;
  DatasetManifest ood_test;
  ImageStore ood_test_images;
};

/// Splits a manifest into source domains (train) and unseen domains. With
/// id_folds >= 2, fold `fold` of a stratified k-fold over the source data is
/// held out as the in-distribution test set.
inline BenchmarkSplit make_split(const DatasetManifest& all, const ImageStore& images, const std::vector<int>& train_domains,
                                 std::size_t id_folds = 0, std::size_t fold = 0, std::uint64_t fold_seed = 0) {
  BenchmarkSplit split;
  std::vector<std::size_t> source, unseen;
  for (std::size_t i = 0; i < all.records.size(); ++i) {
    const bool is_source =
        std::find(train_domains.begin(), train_domains.end(), all.records[i].domain) != train_domains.end();
    (is_source ? source : unseen).push_back(i);
  }
  auto pick = [&](const std::vector<std::size_t>& idx, DatasetManifest& m, ImageStore& s) {
    for (const auto i : idx) {
      m.records.push_back(all.records[i]);
      s.images.push_back(images.images[i]);
    }
  };
  pick(unseen, split.ood_test, split.ood_test_images);
  if (id_folds >= 2) {
    DatasetManifest src;
    for (const auto i : source) src.records.push_back(all.records[i]);
    const auto folds = stratified_kfold(src.label_matrix(), id_folds, fold_seed);
    std::vector<std::size_t> train_idx, test_idx;
    for (const auto j : folds.complement(fold % id_folds)) train_idx.push_back(source[j]);
    for (const auto j : folds.folds[fold % id_folds]) test_idx.push_back(source[j]);
    pick(train_idx, split.train, split.train_images);
    split.id_test.emplace();
    split.id_test_images.emplace();
    pick(test_idx, *split.id_test, *split.id_test_images);
  } else {
    pick(source, split.train, split.train_images);
  }
  return split;
}

struct RunResult {
  std::string row;
  std::uint64_t seed = 0;
  std::optional<double> ood_macro;
  std::optional<double> id_macro;
  MetricsReport ood_report;
  std::optional<MetricsReport> id_report;
  double seconds = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

template <typename T>
RunResult run_one(const ExperimentRow& row, std::uint64_t seed, const BenchmarkSplit& split) {
  const auto start = std::chrono::steady_clock::now();
  auto cfg = row.config;
  cfg.seed = seed;
  RunResult r;
  r.row = row.name;
  r.seed = seed;
  const auto trained = train<T>(cfg, split.train, split.train_images);
  r.aborted = trained.log.aborted;
  r.abort_reason = trained.log.abort_reason;
  r.ood_report = evaluate(trained.state, trained.config, split.ood_test, split.ood_test_images);
  r.ood_report.loss_curve = trained.log.epoch_means;
  r.ood_macro = r.ood_report.find("all")->macro;
  if (split.id_test) {
    r.id_report = evaluate(trained.state, trained.config, *split.id_test, *split.id_test_images);
    r.id_macro = r.id_report->find("all")->macro;
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

struct RowSummary {
  std::string row;
  std::vector<double> ood;  // per seed, in seed order
  std::vector<double> id;
  double ood_mean = 0.0;
  double ood_sd = 0.0;
  double id_mean = 0.0;
  double id_sd = 0.0;
  std::optional<TTestResult> vs_reference;  // paired on OOD macro-AUC, reference - row
};

struct AblationResult {
  std::vector<RunResult> runs;
  std::vector<RowSummary> rows;
  std::string reference_row;
  double seconds = 0.0;

  const RowSummary* find(const std::string& name) const {
    for (const auto& r : rows)
      if (r.row == name) return &r;
    return nullptr;
  }
};

inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (const double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (const double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

/// Runs every (row, seed) pair, `threads` at a time, each with its own RNG
/// streams, then summarizes per row and t-tests each row against
/// `reference_row` (paired over seeds). Seed k trains and tests on splits[k].
template <typename T>
AblationResult run_ablation(const std::vector<ExperimentRow>& rows, const std::vector<std::uint64_t>& seeds,
                            const std::vector<const BenchmarkSplit*>& splits, const std::string& reference_row,
                            std::size_t threads = 1, const std::function<void(const RunResult&)>& on_run = {}) {
  if (splits.size() != seeds.size()) throw DomainError("run_ablation: one split per seed");
  const auto start = std::chrono::steady_clock::now();
  struct Task {
    std::size_t row;
    std::size_t seed;
  };
  std::vector<Task> tasks;
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t s = 0; s < seeds.size(); ++s) tasks.push_back({r, s});
  std::vector<RunResult> results(tasks.size());
  std::vector<std::exception_ptr> errors(tasks.size());
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    while (true) {
      std::size_t t;
      {
        std::lock_guard lock(mu);
        if (next == tasks.size()) return;
        t = next++;
      }
      try {
        results[t] = run_one<T>(rows[tasks[t].row], seeds[tasks[t].seed], *splits[tasks[t].seed]);
        if (on_run) {
          std::lock_guard lock(mu);
          on_run(results[t]);
        }
      } catch (...) {
        errors[t] = std::current_exception();
      }
    }
  };
  const auto n = std::max<std::size_t>(1, std::min(threads, tasks.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  AblationResult out;
  out.runs = std::move(results);
  out.reference_row = reference_row;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    RowSummary s;
    s.row = rows[r].name;
    for (std::size_t k = 0; k < seeds.size(); ++k) {
      const auto& run = out.runs[r * seeds.size() + k];
      s.ood.push_back(run.ood_macro.value_or(std::nan("")));
      if (run.id_macro) s.id.push_back(*run.id_macro);
    }
    std::tie(s.ood_mean, s.ood_sd) = mean_sd(s.ood);
    std::tie(s.id_mean, s.id_sd) = mean_sd(s.id);
    out.rows.push_back(std::move(s));
  }
  if (const auto* ref = out.find(reference_row); ref && seeds.size() >= 2) {
    const auto ref_ood = ref->ood;
    for (auto& s : out.rows) {
      if (s.row == reference_row) continue;
      s.vs_reference = paired_t_test(ref_ood, s.ood);
    }
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

/// Same split for every seed.
template <typename T>
AblationResult run_ablation(const std::vector<ExperimentRow>& rows, const std::vector<std::uint64_t>& seeds,
                            const BenchmarkSplit& split, const std::string& reference_row, std::size_t threads = 1,
                            const std::function<void(const RunResult&)>& on_run = {}) {
  return run_ablation<T>(rows, seeds, std::vector<const BenchmarkSplit*>(seeds.size(), &split), reference_row, threads,
                         on_run);
}

inline nlohmann::json to_json(const AblationResult& a) {
  nlohmann::json j;
  j["reference_row"] = a.reference_row;
  j["seconds"] = a.seconds;
  j["rows"] = nlohmann::json::array();
  for (const auto& s : a.rows) {
    nlohmann::json row{{"row", s.row},
                       {"ood_macro_auc", s.ood},
                       {"ood_mean", s.ood_mean},
                       {"ood_sd", s.ood_sd},
                       {"id_macro_auc", s.id},
                       {"id_mean", s.id_mean},
                       {"id_sd", s.id_sd}};
    if (s.vs_reference) {
      row["t_test_vs_reference"] = {{"t", s.vs_reference->t},
                                    {"p", s.vs_reference->p},
                                    {"df", s.vs_reference->df},
                                    {"mean_difference", s.vs_reference->mean_difference},
                                    {"degenerate", s.vs_reference->degenerate}};
    }
    j["rows"].push_back(row);
  }
  j["runs"] = nlohmann::json::array();
  for (const auto& r : a.runs) {
    j["runs"].push_back({{"row", r.row},
                         {"seed", r.seed},
                         {"ood_macro_auc", r.ood_macro ? nlohmann::json(*r.ood_macro) : nlohmann::json(nullptr)},
                         {"id_macro_auc", r.id_macro ? nlohmann::json(*r.id_macro) : nlohmann::json(nullptr)},
                         {"seconds", r.seconds},
                         {"aborted", r.aborted},
                         {"abort_reason", r.abort_reason},
                         {"config_hash", r.ood_report.config_hash}});
  }
  return j;
}

/// Plain-text comparison table (mean +- sd over seeds, t-test vs reference).
inline std::string format_table(const AblationResult& a) {
  std::ostringstream os;
  os << std::fixed;
  os.precision(4);
  os << "row                    OOD mean   OOD sd     ID mean    t        p\n";
  for (const auto& s : a.rows) {
    os << std::left << std::setw(22) << s.row << ' ' << std::setw(10) << s.ood_mean << ' ' << std::setw(10) << s.ood_sd
       << ' ' << std::setw(10) << s.id_mean << ' ';
    if (s.vs_reference) {
      os << std::setw(8) << s.vs_reference->t << ' ' << s.vs_reference->p;
    } else {
      os << "(reference)";
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace dgstyle
