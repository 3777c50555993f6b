// Acceptance run: one PASS/FAIL line per criterion, summary JSON in the work dir.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dgstyle/checkpoint.hpp"
#include "dgstyle/experiment.hpp"
#include "dgstyle/gradcheck_battery.hpp"

using namespace dgstyle;
namespace fs = std::filesystem;
using Td = Tensor<double>;

namespace {

struct Outcome {
  bool passed = true;
  std::ostringstream detail;
  nlohmann::json data = nlohmann::json::object();

  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

template <typename T>
std::vector<T> flatten(const std::vector<Tensor<T>>& ts) {
  std::vector<T> out;
  for (const auto& t : ts) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

// Per-channel offsets and scales so statistics differ across channels.
Td random_styled(Shape shape, Rng& rng) {
  auto t = battery::random_tensor(shape, rng);
  const auto C = shape[shape.size() - 3];
  const auto P = shape[shape.size() - 2] * shape[shape.size() - 1];
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto c = (i / P) % C;
    d[i] = d[i] * (1.0 + static_cast<double>(c)) + 3.0 * static_cast<double>(c) - 1.0;
  }
  return t;
}

Td constant_map(const Shape& shape, const std::vector<double>& per_instance_channel) {
  const auto P = shape[2] * shape[3];
  std::vector<double> v(numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = per_instance_channel[i / P];
  return Td(shape, std::move(v));
}

struct Corpus {
  fs::path root;
  DatasetManifest manifest;
  ImageStore store;
};

Corpus make_corpus(const fs::path& root, const GeneratorConfig& g) {
  Corpus c;
  c.root = root;
  if (fs::exists(root / "manifest.jsonl")) {
    c.manifest = load_manifest(root / "manifest.jsonl", root, g.num_classes);
  } else {
    fs::create_directories(root);
    c.manifest = generate_dataset(g, root);
    save_manifest(c.manifest, root / "manifest.jsonl");
  }
  c.store = ImageStore::load(c.manifest, root);
  return c;
}

// Double-precision trainer setup small enough for step-level comparisons.
TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.backbone.stage_channels = {4, 8, 8, 8};
  cfg.backbone.input_size = 16;
  cfg.preprocess.resize_to = 18;
  cfg.preprocess.crop_to = 16;
  cfg.batch_size = 4;
  cfg.grad_accum_steps = 1;
  cfg.epochs = 1;
  cfg.adam.lr = 1e-3;
  cfg.precision = Precision::float64;
  cfg.seed = 5;
  return cfg;
}

// Benchmark training setup: IBN backbone on 32px crops of 36px resizes.
TrainConfig benchmark_config() {
  return merge_config(TrainConfig{}, nlohmann::json::parse(R"({
    "adam": {"lr": 1e-3},
    "grad_accum_steps": 1,
    "epochs": 30,
    "ccr_reduction": "element_mean",
    "backbone": {"input_size": 32, "block_norm": "batch", "use_instance_norm_in_early_stages": true},
    "preprocess": {"resize_to": 36, "crop_to": 32}
  })"));
}

// ---------------------------------------------------------------------------

void criterion_1(Outcome& o) {
  const auto start = std::chrono::steady_clock::now();
  const auto cases = run_gradcheck_battery();
  const double secs = seconds_since(start);
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : cases) {
    o.require(c.report.passed, c.name);
    if (c.report.max_rel_error >= worst) {
      worst = c.report.max_rel_error;
      worst_name = c.name;
    }
  }
  o.require(secs < 120.0, "runtime < 2 min");
  o.detail << cases.size() << " cases, worst " << worst_name << " rel err " << worst << ", " << secs << " s";
  o.data = {{"cases", cases.size()}, {"max_rel_error", worst}, {"seconds", secs}};
}

void criterion_2(Outcome& o) {
  double mean_err = 0.0, std_err = 0.0;
  {
    Rng rng(4);
    Graph<double> g(false);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t B = 1 + uniform_index(rng, 3), C = 1 + uniform_index(rng, 4);
      const auto xc = random_styled({B, C, 3 + uniform_index(rng, 6), 3 + uniform_index(rng, 6)}, rng);
      const auto xr = random_styled({B, C, 3 + uniform_index(rng, 6), 3 + uniform_index(rng, 6)}, rng);
      const auto sy = channel_stats(adain(g, xc, xr)), sr = channel_stats(xr);
      for (std::size_t i = 0; i < sy.mean.size(); ++i) {
        mean_err = std::max(mean_err, std::abs(sy.mean[i] - sr.mean[i]));
        std_err = std::max(std_err, std::abs(sy.std[i] - sr.std[i]) / sr.std[i]);
      }
    }
  }
  {
    Rng data(8), rng(9);
    const SrmIlConfig cfg;
    for (int trial = 0; trial < 100; ++trial) {
      const auto r = srm_il(battery::random_tensor({1, 8, 8}, data, 0.0, 255.0), cfg, rng);
      const auto out = channel_stats(r.image);
      mean_err = std::max(mean_err, std::abs(out.mean[0] - r.sampled.mean[0]));
      std_err = std::max(std_err, std::abs(out.std[0] - r.sampled.std[0]) / r.sampled.std[0]);
    }
  }
  o.require(mean_err < 1e-5, "|dmean| < 1e-5");
  o.require(std_err < 1e-4, "|dstd|/std < 1e-4");
  o.detail << "adain+srm_il over 100 cases each: max |dmean| " << mean_err << ", max |dstd|/std " << std_err;
  o.data = {{"max_mean_error", mean_err}, {"max_relative_std_error", std_err}};
}

void criterion_3(Outcome& o, const Corpus& tiny) {
  double focal_err = 0.0;
  {
    Rng rng(1);
    Graph<double> g(false);
    for (int trial = 0; trial < 50; ++trial) {
      const auto p = battery::random_tensor({4, 5}, rng, 0.02, 0.98);
      std::vector<double> yv(20);
      for (auto& v : yv) v = uniform(rng, 0.0, 1.0) < 0.4 ? 1.0 : 0.0;
      const Td y({4, 5}, yv);
      double bce = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) bce -= y[i] * std::log(p[i]) + (1 - y[i]) * std::log(1 - p[i]);
      bce /= static_cast<double>(p.size());
      focal_err = std::max(focal_err, std::abs(focal_loss(g, p, y, FocalConfig{0.5, 0.0}).item() - 0.5 * bce));
    }
  }
  double fl_err = 0.0;
  {
    Rng rng(4);
    Graph<double> g(false);
    for (int trial = 0; trial < 50; ++trial) {
      const Shape shape{1 + uniform_index(rng, 3), 1 + uniform_index(rng, 5), 2 + uniform_index(rng, 6),
                        2 + uniform_index(rng, 6)};
      const auto xc = battery::random_tensor(shape, rng, -2.0, 3.0);
      const auto xr = battery::random_tensor(shape, rng, 0.0, 5.0);
      const auto s = channel_stats(xr);
      const StyleMaps<double> maps{constant_map(shape, s.std), constant_map(shape, s.mean)};
      const auto out = apply_style_maps(g, maps, xc);
      const auto ref = adain(g, xc, xr);
      for (std::size_t i = 0; i < out.size(); ++i) fl_err = std::max(fl_err, std::abs(out[i] - ref[i]));
    }
  }
  double trainer_err = 0.0;
  std::size_t steps = 0;
  {
    auto base = tiny_config();
    base.toggles = Toggles{false, false, false, false};
    base.epochs = 5;
    const auto result = train<double>(base, tiny.manifest, tiny.store);
    const auto cfg = resolve_config(base, tiny.store);
    TrainStreams rs(cfg);
    auto state = model_init<double>(cfg.backbone, rs.init);
    Adam<double> adam(cfg.adam);
    adam.add_group("backbone", state.live.parameters());
    const auto n = tiny.manifest.records.size();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      shuffle(order, rs.shuffle);
      for (std::size_t s = 0; s + cfg.batch_size <= n; s += cfg.batch_size) {
        const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s),
                                           order.begin() + static_cast<std::ptrdiff_t>(s + cfg.batch_size));
        const auto batch = make_train_batch<double>(tiny.manifest, tiny.store, idx, cfg, rs.augment, rs.srm_il);
        adam.zero_grad();
        Graph<double> g;
        const ForwardContext<double> ctx{true, nullptr, &state.running};
        const auto f = forward_stages(g, state.live, cfg.backbone, batch.clean, 1, kStages, ctx);
        const auto loss = focal_loss(g, classify(g, state.live, f).probs, batch.labels, cfg.focal);
        if (steps < result.log.steps.size()) {
          trainer_err = std::max(trainer_err, std::abs(result.log.steps[steps].losses.l_cls - loss.item()));
        }
        ++steps;
        g.backward(loss);
        adam.step();
        ema_update(state, cfg.ema_decay);
      }
    }
    o.require(result.log.steps.size() == 50 && steps == 50, "50 steps");
  }
  o.require(focal_err <= 1e-9, "focal = 0.5 BCE");
  o.require(fl_err <= 1e-6, "srm_fl = adain under constant maps");
  o.require(trainer_err <= 1e-10, "toggles off = plain trainer");
  o.detail << "focal vs 0.5*BCE " << focal_err << "; srm_fl vs adain " << fl_err << "; trainer over " << steps
           << " steps " << trainer_err;
  o.data = {{"focal_error", focal_err}, {"srm_fl_error", fl_err}, {"trainer_error", trainer_err}, {"steps", steps}};
}

void criterion_4(Outcome& o, const Corpus& tiny) {
  const auto cfg = resolve_config(tiny_config(), tiny.store);
  TrainStreams rs(cfg);
  auto state = model_init<double>(cfg.backbone, rs.init);
  const auto nets = style_nets_init<double>(cfg.backbone.stage_channels[1], cfg.srm_fl.reduction, rs.style_nets);
  Adam<double> adam(cfg.adam);
  adam.add_group("backbone", state.live.parameters());
  adam.add_group("style_nets", nets.parameters());
  const auto batch = make_train_batch<double>(tiny.manifest, tiny.store, {0, 1, 2, 3}, cfg, rs.augment, rs.srm_il);
  const std::vector<std::size_t> pairing{2, 0, 3, 1};

  auto step = [&](bool from_phi) {
    adam.zero_grad();
    Graph<double> g;
    const auto obj = dual_objective<double>(g, state, &nets, batch, pairing, cfg);
    g.backward(from_phi ? *obj.l_phi : obj.l_total);
    adam.step();
  };
  auto backbone_before = flatten(state.live.parameters());
  auto nets_before = flatten(nets.parameters());
  step(false);
  const bool nets_frozen = flatten(nets.parameters()) == nets_before;
  const bool backbone_moved = flatten(state.live.parameters()) != backbone_before;
  backbone_before = flatten(state.live.parameters());
  nets_before = flatten(nets.parameters());
  step(true);
  const bool backbone_frozen = flatten(state.live.parameters()) == backbone_before;
  const bool nets_moved = flatten(nets.parameters()) != nets_before;
  o.require(nets_frozen, "style nets unchanged by L_total step");
  o.require(backbone_frozen, "backbone unchanged by L_phi step");
  o.require(backbone_moved && nets_moved, "each step moves its own group");
  o.detail << "L_total step: style nets " << (nets_frozen ? "bitwise unchanged" : "CHANGED") << "; L_phi step: backbone "
           << (backbone_frozen ? "bitwise unchanged" : "CHANGED");
  o.data = {{"style_nets_unchanged", nets_frozen}, {"backbone_unchanged", backbone_frozen}};
}

void criterion_5(Outcome& o) {
  double auc_err = 0.0;
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 60);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::round(uniform(rng, 0.0, 1.0) * 10.0) / 10.0;
      y[i] = uniform(rng, 0.0, 1.0) < 0.4 ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (y[i] != 1 || y[j] != 0) continue;
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
    auc_err = std::max(auc_err, std::abs(roc_auc(s, y).value_or(-1.0) - wins / pairs));
  }

  const std::vector<double> a{2, 3, 4, 1, 2}, b{1, 2, 2, 1, 1};
  const auto t = paired_t_test(a, b);
  auto four_sig = [](double x, double ref) { return std::abs(x - ref) <= 0.5e-4 * std::abs(ref); };
  const bool t_ok = four_sig(t.t, 3.16228) && four_sig(t.p, 0.03411);

  int spread = 0;
  Rng krng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t B = 10 + uniform_index(krng, 191), N = 1 + uniform_index(krng, 10);
    std::vector<std::vector<int>> labels(B, std::vector<int>(N));
    const double density = uniform(krng, 0.05, 0.6);
    for (auto& row : labels)
      for (auto& l : row) l = uniform(krng, 0.0, 1.0) < density ? 1 : 0;
    const auto f = stratified_kfold(labels, 5, static_cast<std::uint64_t>(trial));
    for (std::size_t l = 0; l < N; ++l) {
      std::vector<int> count;
      for (const auto& fold : f.folds) {
        int c = 0;
        for (const auto i : fold) c += labels[i][l];
        count.push_back(c);
      }
      const auto [mn, mx] = std::minmax_element(count.begin(), count.end());
      spread = std::max(spread, *mx - *mn);
    }
  }
  o.require(auc_err <= 1e-12, "roc_auc oracle");
  o.require(t_ok, "t-test example");
  o.require(spread <= 2, "k-fold spread <= 2");
  o.detail << "roc_auc max err " << auc_err << " (200 cases); t=" << t.t << " p=" << t.p
           << "; max k-fold spread " << spread << " (200 instances)";
  o.data = {{"auc_error", auc_err}, {"t", t.t}, {"p", t.p}, {"kfold_spread", spread}};
}

void criterion_6(Outcome& o, const Corpus& bench, const fs::path& work, std::size_t threads) {
  const auto split = make_split(bench.manifest, bench.store, {0, 1});
  const auto all = component_rows(benchmark_config());
  std::vector<ExperimentRow> rows;
  for (const auto& r : all)
    if (r.name == "i_base" || r.name == "ii_srm_il" || r.name == "vi_full") rows.push_back(r);
  const std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  const auto res = run_ablation<float>(rows, seeds, split, "vi_full", threads, [](const RunResult& r) {
    std::cerr << "  " << r.row << " seed " << r.seed << " OOD macro-AUC " << r.ood_macro.value_or(std::nan(""))
              << " (" << r.seconds << " s)" << std::endl;
  });
  save_json(to_json(res), work / "benchmark_ablation.json");
  {
    std::ofstream os(work / "benchmark_ablation.txt");
    os << format_table(res);
  }
  const auto* base = res.find("i_base");
  const auto* il = res.find("ii_srm_il");
  const auto* full = res.find("vi_full");
  const auto test = paired_t_test(full->ood, base->ood);
  const double gain = full->ood_mean - base->ood_mean;
  for (const auto& r : res.runs) o.require(!r.aborted, r.row + " aborted");
  o.require(split.train.records.size() == 1500 && split.ood_test.records.size() == 600, "1500/600 split");
  o.require(gain >= 0.02, "gain >= 0.02");
  o.require(test.p < 0.05 && test.t > 0.0, "paired t-test p < 0.05");
  o.require(base->ood_mean <= il->ood_mean + 0.005, "base <= IL + 0.005");
  o.require(il->ood_mean <= full->ood_mean + 0.005, "IL <= full + 0.005");
  o.require(res.seconds <= 1800.0, "runtime <= 30 min");
  o.detail << "OOD macro-AUC base " << base->ood_mean << ", +SRM-IL " << il->ood_mean << ", full " << full->ood_mean
           << "; gain " << gain << ", t=" << test.t << " p=" << test.p << "; " << res.seconds << " s on " << threads
           << " thread(s)";
  o.data = {{"base", base->ood}, {"srm_il", il->ood}, {"full", full->ood}, {"gain", gain},
            {"t", test.t},       {"p", test.p},       {"seconds", res.seconds}, {"threads", threads}};
}

void criterion_7(Outcome& o, const Corpus& bench) {
  const auto rep = stats_report(bench.manifest, bench.root);
  const double ratio = rep.min_centroid_distance / rep.mean_spread;
  o.require(rep.errors.empty(), "all images readable");
  o.require(ratio >= 3.0, "centroid distance >= 3x spread");
  o.require(rep.nearest_centroid_accuracy >= 0.9, "nearest-centroid accuracy >= 0.9");
  o.detail << "min centroid distance / mean spread " << ratio << ", nearest-centroid accuracy "
           << rep.nearest_centroid_accuracy << " over " << rep.rows.size() << " images";
  o.data = stats_summary_json(rep);
}

void criterion_8(Outcome& o, const Corpus& bench, const fs::path& work) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < bench.manifest.records.size(); i += 15) idx.push_back(i);
  const auto manifest = bench.manifest.subset(idx);
  ImageStore store;
  for (const auto i : idx) store.images.push_back(bench.store.images[i]);
  auto cfg = TrainConfig{};
  cfg.epochs = 2;
  const auto dir = work / "determinism";
  fs::create_directories(dir);
  for (const auto* name : {"a.ckpt", "b.ckpt"}) {
    const auto r = train<float>(cfg, manifest, store);
    save_checkpoint(dir / name, r.config, r.state, r.nets ? &*r.nets : nullptr);
  }
  const auto a = slurp(dir / "a.ckpt"), b = slurp(dir / "b.ckpt");
  o.require(!a.empty() && a == b, "identical checkpoint bytes");
  o.detail << "two runs (" << manifest.records.size() << " images, default config, 2 epochs): " << a.size()
           << " and " << b.size() << " bytes, " << (a == b ? "identical" : "DIFFERENT");
  o.data = {{"bytes", a.size()}, {"identical", a == b}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dgstyle acceptance run"};
  fs::path work = "acceptance_work";
  std::vector<int> only;
  std::size_t threads = 1;
  app.add_option("--work-dir", work, "Directory for generated data and reports");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 8));
  app.add_option("--threads", threads, "Concurrent training runs for the benchmark")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int c) { return selected.empty() || selected.count(c) > 0; };
  fs::create_directories(work);

  std::optional<Corpus> tiny, bench;
  auto tiny_corpus = [&]() -> const Corpus& {
    if (!tiny) {
      GeneratorConfig g;
      g.image_size = 32;
      g.per_domain_count = {20, 20, 0};
      tiny = make_corpus(work / "tiny", g);
    }
    return *tiny;
  };
  auto bench_corpus = [&]() -> const Corpus& {
    if (!bench) bench = make_corpus(work / "benchmark", GeneratorConfig{});
    return *bench;
  };

  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"gradient battery", criterion_1},
      {"stat matching", criterion_2},
      {"reduction identities", [&](Outcome& o) { criterion_3(o, tiny_corpus()); }},
      {"gradient partition", [&](Outcome& o) { criterion_4(o, tiny_corpus()); }},
      {"metric oracles", criterion_5},
      {"desk-scale domain generalization", [&](Outcome& o) { criterion_6(o, bench_corpus(), work, threads); }},
      {"domain statistics gap", [&](Outcome& o) { criterion_7(o, bench_corpus()); }},
      {"determinism", [&](Outcome& o) { criterion_8(o, bench_corpus(), work); }},
  };

  nlohmann::json summary = nlohmann::json::object();
  bool all_passed = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!wanted(id)) continue;
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.passed = false;
      o.detail << "exception: " << e.what();
    }
    all_passed = all_passed && o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first
              << "): " << o.detail.str() << std::endl;
    o.data["passed"] = o.passed;
    o.data["wall_seconds"] = seconds_since(start);
    summary[std::to_string(id)] = o.data;
  }
  save_json(summary, work / "acceptance_summary.json");
  return all_passed ? 0 : 1;
}
