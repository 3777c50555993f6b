#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dgstyle/checkpoint.hpp"
#include "dgstyle/experiment.hpp"
#include "dgstyle/gradcheck_battery.hpp"

using namespace dgstyle;
namespace fs = std::filesystem;

namespace {

// Config file (optional) with inline JSON merge patches applied in order.
TrainConfig resolve_train_config(const std::optional<fs::path>& file, const std::vector<std::string>& patches) {
  auto cfg = file ? load_config(*file) : TrainConfig{};
  for (const auto& p : patches) cfg = merge_config(cfg, nlohmann::json::parse(p));
  cfg.validate();
  return cfg;
}

fs::path root_of(const fs::path& manifest, const std::optional<fs::path>& root) {
  return root ? *root : manifest.parent_path();
}

void write_resolved(const nlohmann::json& j, const fs::path& out) {
  fs::create_directories(out);
  save_json(j, out / "resolved_config.json");
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  fs::path out;
  std::optional<fs::path> config;
  std::vector<std::string> set;
  std::optional<std::size_t> threads;
};

int generate_data(const GenerateArgs& a) {
  nlohmann::json j = GeneratorConfig{};
  if (a.config) {
    std::ifstream is(*a.config);
    if (!is) throw IoError("cannot open " + a.config->string());
    j.merge_patch(nlohmann::json::parse(is));
  }
  for (const auto& p : a.set) j.merge_patch(nlohmann::json::parse(p));
  auto cfg = j.get<GeneratorConfig>();
  if (a.threads) cfg.threads = *a.threads;
  fs::create_directories(a.out);
  const auto manifest = generate_dataset(cfg, a.out);
  save_manifest(manifest, a.out / "manifest.jsonl");
  std::vector<int> unseen;
  for (const int d : manifest.domains())
    if (std::find(cfg.train_domains.begin(), cfg.train_domains.end(), d) == cfg.train_domains.end()) unseen.push_back(d);
  save_manifest(manifest.filter_domains(cfg.train_domains), a.out / "train.jsonl");
  save_manifest(manifest.filter_domains(unseen), a.out / "unseen.jsonl");
  write_resolved(cfg, a.out);
  std::cout << "wrote " << manifest.records.size() << " images to " << a.out.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  fs::path manifest;
  std::optional<fs::path> root;
  std::optional<fs::path> config;
  std::vector<std::string> set;
  fs::path out;
  bool quiet = false;
};

template <typename T>
int train_as(const TrainConfig& cfg, const TrainArgs& a) {
  const auto root = root_of(a.manifest, a.root);
  const auto manifest = load_manifest(a.manifest, root, cfg.backbone.num_classes);
  const auto store = ImageStore::load(manifest, root);
  fs::create_directories(a.out);
  TrainOptions opt;
  opt.abort_checkpoint = a.out / "last_good.ckpt";
  if (!a.quiet) {
    opt.on_step = [](const StepLog& s) {
      if (s.step % 50 == 0) std::cerr << "step " << s.step << " epoch " << s.epoch << " l_total " << s.losses.l_total << '\n';
    };
  }
  const auto r = train<T>(cfg, manifest, store, opt);
  write_resolved(r.config, a.out);
  write_loss_log(r.log, a.out / "loss_log.csv");
  if (r.log.aborted) {
    std::cerr << "training aborted: " << r.log.abort_reason << " (last good state in "
              << opt.abort_checkpoint->string() << ")\n";
    return 2;
  }
  save_checkpoint(a.out / "checkpoint.ckpt", r.config, r.state, r.nets ? &*r.nets : nullptr);
  std::cout << "checkpoint " << (a.out / "checkpoint.ckpt").string() << " after " << r.state.step << " steps\n";
  return 0;
}

int train_cmd(const TrainArgs& a) {
  const auto cfg = resolve_train_config(a.config, a.set);
  return cfg.precision == Precision::float64 ? train_as<double>(cfg, a) : train_as<float>(cfg, a);
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  fs::path checkpoint;
  fs::path manifest;
  std::optional<fs::path> root;
  fs::path out;
  bool live = false;
};

template <typename T>
int eval_as(const EvalArgs& a) {
  const auto ck = load_checkpoint<T>(a.checkpoint);
  const auto root = root_of(a.manifest, a.root);
  const auto manifest = load_manifest(a.manifest, root, ck.config.backbone.num_classes);
  const auto store = ImageStore::load(manifest, root);
  const auto rep = evaluate(ck.state, ck.config, manifest, store, !a.live);
  write_resolved(ck.config, a.out);
  save_json(to_json(rep), a.out / "metrics.json");
  write_metrics_csv(rep, a.out / "metrics.csv");
  for (const auto& d : rep.domains) {
    std::cout << d.name << " (" << d.count << " images): macro-AUC ";
    if (d.macro) {
      std::cout << *d.macro;
    } else {
      std::cout << "n/a";
    }
    if (!d.excluded.empty()) std::cout << ", " << d.excluded.size() << " class(es) excluded";
    std::cout << '\n';
  }
  return 0;
}

int eval_cmd(const EvalArgs& a) {
  return checkpoint_precision(a.checkpoint) == Precision::float64 ? eval_as<double>(a) : eval_as<float>(a);
}

// ---------------------------------------------------------------------------

struct AblateArgs {
  fs::path manifest;
  std::optional<fs::path> root;
  std::optional<fs::path> config;
  std::vector<std::string> set;
  fs::path out;
  std::string sweep = "components";
  std::string reference = "vi_full";
  std::vector<int> train_domains{0, 1};
  std::size_t seeds = 5;
  std::uint64_t first_seed = 0;
  std::size_t id_folds = 0;
  std::size_t threads = 1;
  std::vector<double> etas{0.001, 0.01, 0.1, 1.0};
  std::vector<std::string> rows;
};

template <typename T>
int ablate_as(const TrainConfig& cfg, const AblateArgs& a) {
  const auto root = root_of(a.manifest, a.root);
  const auto manifest = load_manifest(a.manifest, root, cfg.backbone.num_classes);
  const auto store = ImageStore::load(manifest, root);
  auto rows = sweep_rows(a.sweep, cfg, a.etas);
  if (!a.rows.empty()) {
    std::erase_if(rows, [&](const ExperimentRow& r) { return std::find(a.rows.begin(), a.rows.end(), r.name) == a.rows.end(); });
    if (rows.empty()) throw DomainError("ablate: --rows matched nothing in sweep '" + a.sweep + "'");
  }
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < a.seeds; ++i) seeds.push_back(a.first_seed + i);
  // With ID folds, seed k holds out fold (k mod id_folds) of the source data.
  std::vector<BenchmarkSplit> splits;
  if (a.id_folds >= 2) {
    for (std::size_t k = 0; k < seeds.size(); ++k)
      splits.push_back(make_split(manifest, store, a.train_domains, a.id_folds, k, cfg.seed));
  } else {
    splits.push_back(make_split(manifest, store, a.train_domains));
  }
  std::vector<const BenchmarkSplit*> per_seed;
  for (std::size_t k = 0; k < seeds.size(); ++k) per_seed.push_back(&splits[std::min(k, splits.size() - 1)]);
  const auto res = run_ablation<T>(rows, seeds, per_seed, a.reference, a.threads, [](const RunResult& r) {
    std::cerr << r.row << " seed " << r.seed << " OOD macro-AUC " << r.ood_macro.value_or(std::nan("")) << " ("
              << r.seconds << " s)\n";
  });
  nlohmann::json resolved = {{"base", cfg}, {"sweep", a.sweep}, {"reference_row", a.reference},
                             {"seeds", seeds},  {"train_domains", a.train_domains}, {"id_folds", a.id_folds},
                             {"rows", nlohmann::json::object()}};
  for (const auto& r : rows) resolved["rows"][r.name] = r.config;
  write_resolved(resolved, a.out);
  save_json(to_json(res), a.out / "ablation.json");
  const auto table = format_table(res);
  std::ofstream(a.out / "ablation.txt") << table;
  std::cout << table;
  return 0;
}

int ablate_cmd(const AblateArgs& a) {
  const auto cfg = resolve_train_config(a.config, a.set);
  return cfg.precision == Precision::float64 ? ablate_as<double>(cfg, a) : ablate_as<float>(cfg, a);
}

// ---------------------------------------------------------------------------

struct StatsArgs {
  fs::path manifest;
  std::optional<fs::path> root;
  fs::path out;
  double epsilon = kStyleEpsilon;
};

int stats_cmd(const StatsArgs& a) {
  const auto root = root_of(a.manifest, a.root);
  const auto manifest = load_manifest(a.manifest, root);
  const auto rep = stats_report(manifest, root, a.epsilon);
  write_resolved({{"manifest", a.manifest.string()}, {"root", root.string()}, {"epsilon", a.epsilon}}, a.out);
  write_stats_csv(rep, a.out / "stats.csv");
  const auto summary = stats_summary_json(rep);
  save_json(summary, a.out / "stats_summary.json");
  std::cout << summary.dump(2) << '\n';
  for (const auto& e : rep.errors) std::cerr << "error: " << e << '\n';
  return rep.errors.empty() ? 0 : 1;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::uint64_t seed = 0;
  double tol = 1e-4;
  std::optional<fs::path> out;
};

int gradcheck_cmd(const GradcheckArgs& a) {
  const auto cases = run_gradcheck_battery(a.seed, a.tol);
  std::size_t failed = 0;
  nlohmann::json report = nlohmann::json::array();
  for (const auto& c : cases) {
    failed += c.report.passed ? 0 : 1;
    std::cout << (c.report.passed ? "ok   " : "FAIL ") << c.name << "  max rel err " << c.report.max_rel_error << " over "
              << c.report.coordinates << " coords\n";
    report.push_back({{"name", c.name},
                      {"passed", c.report.passed},
                      {"max_rel_error", c.report.max_rel_error},
                      {"coordinates", c.report.coordinates},
                      {"seconds", c.seconds}});
  }
  std::cout << cases.size() - failed << "/" << cases.size() << " passed\n";
  if (a.out) {
    write_resolved({{"seed", a.seed}, {"tol", a.tol}}, *a.out);
    save_json(report, *a.out / "gradcheck.json");
  }
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Style-randomized domain generalization on a synthetic multi-label benchmark"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate-data", "Render the synthetic benchmark and its manifests");
  g->add_option("--out", gen.out, "Dataset directory")->required();
  g->add_option("--config", gen.config, "Generator config JSON")->check(CLI::ExistingFile);
  g->add_option("--set", gen.set, "JSON merge patch applied after --config (repeatable)");
  g->add_option("--threads", gen.threads, "Rendering threads")->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one model and write a checkpoint and loss log");
  t->add_option("--manifest", tr.manifest, "Training manifest (JSONL)")->required()->check(CLI::ExistingFile);
  t->add_option("--root", tr.root, "Image root (default: manifest directory)");
  t->add_option("--config", tr.config, "Training config JSON")->check(CLI::ExistingFile);
  t->add_option("--set", tr.set, "JSON merge patch applied after --config (repeatable)");
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_flag("--quiet", tr.quiet, "No per-step progress");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Per-domain ROC-AUC of a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--manifest", ev.manifest, "Evaluation manifest (JSONL)")->required()->check(CLI::ExistingFile);
  e->add_option("--root", ev.root, "Image root (default: manifest directory)");
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_flag("--live", ev.live, "Evaluate live weights instead of the EMA copy");

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Run an ablation sweep over seeds with paired t-tests");
  a->add_option("--manifest", ab.manifest, "Full manifest (source and unseen domains)")->required()->check(CLI::ExistingFile);
  a->add_option("--root", ab.root, "Image root (default: manifest directory)");
  a->add_option("--config", ab.config, "Base training config JSON")->check(CLI::ExistingFile);
  a->add_option("--set", ab.set, "JSON merge patch applied after --config (repeatable)");
  a->add_option("--out", ab.out, "Output directory")->required();
  a->add_option("--sweep", ab.sweep, "Sweep name")
      ->check(CLI::IsMember({"components", "consistency", "stage", "embedding", "architecture", "eta"}))
      ->capture_default_str();
  a->add_option("--reference", ab.reference, "Row the t-tests compare against")->capture_default_str();
  a->add_option("--rows", ab.rows, "Only run these rows of the sweep");
  a->add_option("--train-domains", ab.train_domains, "Source domains; the rest are unseen")->capture_default_str();
  a->add_option("--seeds", ab.seeds, "Number of seeds")->check(CLI::PositiveNumber)->capture_default_str();
  a->add_option("--first-seed", ab.first_seed, "First seed")->capture_default_str();
  a->add_option("--id-folds", ab.id_folds, "Hold out one stratified fold per seed for ID metrics (0 = none)");
  a->add_option("--threads", ab.threads, "Concurrent training runs")->check(CLI::PositiveNumber)->capture_default_str();
  a->add_option("--etas", ab.etas, "Values for the eta sweep");

  StatsArgs st;
  auto* s = app.add_subcommand("stats", "Per-image intensity statistics grouped by domain");
  s->add_option("--manifest", st.manifest, "Manifest (JSONL)")->required()->check(CLI::ExistingFile);
  s->add_option("--root", st.root, "Image root (default: manifest directory)");
  s->add_option("--out", st.out, "Output directory")->required();
  s->add_option("--epsilon", st.epsilon, "Variance epsilon")->capture_default_str();

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  c->add_option("--seed", gc.seed, "Input seed")->capture_default_str();
  c->add_option("--tol", gc.tol, "Maximum relative error")->capture_default_str();
  c->add_option("--out", gc.out, "Write gradcheck.json here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*g) return generate_data(gen);
    if (*t) return train_cmd(tr);
    if (*e) return eval_cmd(ev);
    if (*a) return ablate_cmd(ab);
    if (*s) return stats_cmd(st);
    if (*c) return gradcheck_cmd(gc);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 1;
}
