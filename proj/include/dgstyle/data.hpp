#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgstyle/png_io.hpp"
#include "dgstyle/rng.hpp"
#include "dgstyle/style_ops.hpp"
#include "dgstyle/tensor.hpp"

namespace dgstyle {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Synthetic benchmark

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  bool valid() const { return lo <= hi; }
  double sample(Rng& rng) const { return lo == hi ? lo : uniform(rng, lo, hi); }
};

/// Acquisition-style transform of one domain, applied to a [0,1] content
/// canvas v:  contrast * v^gamma + brightness + field(x,y) + noise, then
/// scaled to [0,255]. Every parameter is drawn per image from its interval.
struct DomainSpec {
  int domain_id = 0;
  Interval gamma{1.0, 1.0};
  Interval contrast{1.0, 1.0};
  Interval brightness_offset{0.0, 0.0};
  Interval lowfreq_field_amplitude{0.0, 0.0};
  Interval noise_std{0.0, 0.0};

  void validate() const {
    for (const auto* iv : {&gamma, &contrast, &brightness_offset, &lowfreq_field_amplitude, &noise_std}) {
      if (!iv->valid()) throw DomainError("domain " + std::to_string(domain_id) + ": empty interval");
    }
    if (!(gamma.lo > 0.0)) throw DomainError("domain " + std::to_string(domain_id) + ": gamma must be > 0");
    if (contrast.lo < 0.0 || lowfreq_field_amplitude.lo < 0.0 || noise_std.lo < 0.0) {
      throw DomainError("domain " + std::to_string(domain_id) + ": negative amplitude");
    }
  }
};

/// Zero style: every domain renders the content canvas unchanged.
inline DomainSpec identity_domain(int id) {
  DomainSpec d;
  d.domain_id = id;
  return d;
}

/// Two training domains (dark and mid-gray, moderate contrast) and one unseen
/// domain (bright, low contrast, compressed gamma, shading field).
inline std::vector<DomainSpec> default_domain_specs() {
  DomainSpec d0{0, {0.9, 1.1}, {0.50, 0.60}, {0.04, 0.10}, {0.00, 0.03}, {0.010, 0.020}};
  DomainSpec d1{1, {0.9, 1.1}, {0.50, 0.60}, {0.34, 0.40}, {0.00, 0.03}, {0.010, 0.020}};
  DomainSpec d2{2, {0.60, 0.75}, {0.22, 0.28}, {0.62, 0.68}, {0.02, 0.04}, {0.010, 0.015}};
  return {d0, d1, d2};
}

inline constexpr std::array<const char*, 7> kShapeNames{"circle", "rectangle", "triangle", "cross",
                                                        "ring",   "diamond",   "diagonal_cross"};

struct GeneratorConfig {
  std::size_t num_classes = 5;
  std::size_t image_size = 72;
  double class_probability = 0.4;
  std::uint64_t seed = 2024;
  std::vector<DomainSpec> domains = default_domain_specs();
  std::vector<std::size_t> per_domain_count{750, 750, 600};
  /// Domains whose images belong to the training split; others are unseen.
  std::vector<int> train_domains{0, 1};
  std::size_t max_placement_retries = 200;
  std::size_t threads = 1;

  void validate() const {
    if (num_classes == 0 || num_classes > kShapeNames.size()) {
      throw DomainError("generator: num_classes must lie in [1," + std::to_string(kShapeNames.size()) + "]");
    }
    if (image_size < 16) throw DomainError("generator: image_size must be >= 16");
    if (!(class_probability >= 0.0 && class_probability <= 1.0)) {
      throw DomainError("generator: class_probability must lie in [0,1]");
    }
    if (domains.size() != per_domain_count.size()) {
      throw DomainError("generator: one per-domain count per domain spec");
    }
    for (const auto& d : domains) d.validate();
  }
};

/// Style-free content: canvas values in [0,1] plus the shape-presence labels.
struct ContentSample {
  std::size_t size = 0;
  std::vector<double> canvas;
  std::vector<int> labels;
};

namespace detail {

struct Box {
  double x0, y0, x1, y1;
  bool overlaps(const Box& o, double margin) const {
    return !(x1 + margin < o.x0 || o.x1 + margin < x0 || y1 + margin < o.y0 || o.y1 + margin < y0);
  }
};

// Signed coverage test of shape `kind` centred at (cx, cy) with half-extent r.
inline bool shape_contains(std::size_t kind, double px, double py, double cx, double cy, double r) {
  const double dx = px - cx, dy = py - cy;
  switch (kind) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::abs(dx) <= r && std::abs(dy) <= 0.6 * r;
    case 2: {
      // Upward triangle with apex at top: |dx| <= r * (dy + r) / (2r).
      if (dy < -r || dy > r) return false;
      return std::abs(dx) <= 0.5 * (dy + r);
    }
    case 3: return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
    case 4: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.45 * r * r;
    }
    case 5: return std::abs(dx) + std::abs(dy) <= r;
    case 6: {
      const double u = (dx + dy) / std::numbers::sqrt2, v = (dx - dy) / std::numbers::sqrt2;
      const double lim = r * std::numbers::sqrt2 * 0.75;
      return (std::abs(u) <= 0.22 * r && std::abs(v) <= lim) || (std::abs(v) <= 0.22 * r && std::abs(u) <= lim);
    }
    default: return false;
  }
}

}  // namespace detail

/// Renders the content canvas of one sample: a smooth body-like background
/// and, independently per class with probability `class_probability`, that
/// class's shape at a random non-overlapping position and scale.
inline ContentSample render_content(std::size_t size, std::size_t num_classes, double class_probability,
                                    std::uint64_t sample_seed, std::size_t max_retries = 200) {
  Rng rng = make_rng(sample_seed, "content");
  ContentSample out;
  out.size = size;
  out.canvas.assign(size * size, 0.0);
  out.labels.assign(num_classes, 0);

  const double s = static_cast<double>(size);
  const double ex = s * uniform(rng, 0.36, 0.44), ey = s * uniform(rng, 0.40, 0.48);
  const double ecx = s * 0.5 + uniform(rng, -0.04, 0.04) * s, ecy = s * 0.5 + uniform(rng, -0.04, 0.04) * s;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) + 0.5 - ecx) / ex, v = (static_cast<double>(y) + 0.5 - ecy) / ey;
      const double r2 = u * u + v * v;
      out.canvas[y * size + x] = 0.20 + (r2 < 1.0 ? 0.18 * (1.0 - r2) : 0.0);
    }

  std::vector<detail::Box> placed;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (uniform(rng, 0.0, 1.0) >= class_probability) continue;
    out.labels[c] = 1;
    const double intensity = uniform(rng, 0.40, 0.55);
    bool ok = false;
    for (std::size_t attempt = 0; attempt < max_retries && !ok; ++attempt) {
      const double r = s * uniform(rng, 0.08, 0.12);
      const double cx = uniform(rng, r + 2.0, s - r - 2.0), cy = uniform(rng, r + 2.0, s - r - 2.0);
      const detail::Box box{cx - r, cy - r, cx + r, cy + r};
      bool clash = false;
      for (const auto& b : placed) clash = clash || b.overlaps(box, 1.5);
      if (clash) continue;
      placed.push_back(box);
      ok = true;
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          // 2x2 supersampled coverage for softer edges.
          int hits = 0;
          for (int sy = 0; sy < 2; ++sy)
            for (int sx = 0; sx < 2; ++sx)
              hits += detail::shape_contains(c, static_cast<double>(x) + 0.25 + 0.5 * sx,
                                             static_cast<double>(y) + 0.25 + 0.5 * sy, cx, cy, r);
          out.canvas[y * size + x] += intensity * hits / 4.0;
        }
    }
    if (!ok) {
      throw DomainError("generator: could not place shape '" + std::string(kShapeNames[c]) + "' after " +
                        std::to_string(max_retries) + " attempts");
    }
  }
  return out;
}

/// Applies a domain's acquisition style to a content canvas and quantizes.
inline GrayImage apply_domain_style(const ContentSample& content, const DomainSpec& spec, std::uint64_t sample_seed) {
  Rng rng = make_rng(sample_seed, "style");
  const double gamma = spec.gamma.sample(rng);
  const double contrast = spec.contrast.sample(rng);
  const double brightness = spec.brightness_offset.sample(rng);
  const double amplitude = spec.lowfreq_field_amplitude.sample(rng);
  const double noise = spec.noise_std.sample(rng);
  const double fx = uniform(rng, 0.5, 1.5), fy = uniform(rng, 0.5, 1.5), phase = uniform(rng, 0.0, 6.283185307179586);

  const auto n = content.size;
  GrayImage img{n, n, std::vector<std::uint8_t>(n * n)};
  const double s = static_cast<double>(n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double v = std::clamp(content.canvas[y * n + x], 0.0, 1.0);
      double out = contrast * std::pow(v, gamma) + brightness;
      if (amplitude > 0.0) {
        out += amplitude * std::cos(6.283185307179586 * (fx * static_cast<double>(x) + fy * static_cast<double>(y)) / s + phase);
      }
      if (noise > 0.0) out += noise * normal(rng);
      img.pixels[y * n + x] = static_cast<std::uint8_t>(std::clamp(std::lround(out * 255.0), 0L, 255L));
    }
  return img;
}

// ---------------------------------------------------------------------------
// Manifest

struct SampleRecord {
  std::string path;  // relative to the dataset root
  std::vector<int> labels;
  int domain = 0;
  std::uint64_t seed = 0;

  bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
  std::vector<SampleRecord> records;

  std::size_t num_classes() const { return records.empty() ? 0 : records.front().labels.size(); }
  bool operator==(const DatasetManifest&) const = default;

  DatasetManifest filter_domains(const std::vector<int>& domains) const {
    DatasetManifest out;
    for (const auto& r : records)
      if (std::find(domains.begin(), domains.end(), r.domain) != domains.end()) out.records.push_back(r);
    return out;
  }

  DatasetManifest subset(const std::vector<std::size_t>& indices) const {
    DatasetManifest out;
    for (const auto i : indices) out.records.push_back(records.at(i));
    return out;
  }

  std::vector<int> domains() const {
    std::vector<int> out;
    for (const auto& r : records)
      if (std::find(out.begin(), out.end(), r.domain) == out.end()) out.push_back(r.domain);
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<std::vector<int>> label_matrix() const {
    std::vector<std::vector<int>> out;
    for (const auto& r : records) out.push_back(r.labels);
    return out;
  }
};

inline void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("save_manifest: cannot open " + path.string());
  for (const auto& r : manifest.records) {
    nlohmann::json j{{"path", r.path}, {"labels", r.labels}, {"domain", r.domain}, {"seed", r.seed}};
    os << j.dump() << '\n';
  }
  if (!os) throw IoError("save_manifest: write failed for " + path.string());
}

/// Reads a JSON-lines manifest. With `root`, also checks every image exists.
/// With `num_classes`, enforces the label length; otherwise all records must
/// agree with the first.
inline DatasetManifest load_manifest(const fs::path& path, const std::optional<fs::path>& root = std::nullopt,
                                     std::optional<std::size_t> num_classes = std::nullopt) {
  std::ifstream is(path);
  if (!is) throw IoError("load_manifest: cannot open " + path.string());
  DatasetManifest out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path.string() + ":" + std::to_string(line_no);
    SampleRecord r;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object() || j.size() != 4 || !j.contains("path") || !j.contains("labels") ||
          !j.contains("domain") || !j.contains("seed")) {
        throw IoError(where + ": record must have exactly the fields path, labels, domain, seed");
      }
      r.path = j.at("path").get<std::string>();
      r.labels = j.at("labels").get<std::vector<int>>();
      r.domain = j.at("domain").get<int>();
      r.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError(where + ": malformed record (" + e.what() + ")");
    }
    for (const int l : r.labels) {
      if (l != 0 && l != 1) throw IoError(where + ": labels must be 0 or 1");
    }
    const auto expected = num_classes ? *num_classes : (out.records.empty() ? r.labels.size() : out.num_classes());
    if (r.labels.size() != expected) {
      throw IoError(where + ": expected " + std::to_string(expected) + " labels, got " +
                    std::to_string(r.labels.size()));
    }
    if (root && !fs::exists(*root / r.path)) throw IoError(where + ": missing image " + (*root / r.path).string());
    out.records.push_back(std::move(r));
  }
  return out;
}

inline std::string image_relpath(int domain, std::size_t index) {
  std::ostringstream os;
  os << "images/d" << domain << "_" << std::setw(5) << std::setfill('0') << index << ".png";
  return os.str();
}

/// Renders and writes every image under `root`; returns the full manifest in
/// index order. Per-sample seeds derive from (cfg.seed, global index), so the
/// output is identical for any thread count.
inline DatasetManifest generate_dataset(const GeneratorConfig& cfg, const fs::path& root) {
  cfg.validate();
  fs::create_directories(root / "images");
  DatasetManifest manifest;
  for (std::size_t d = 0; d < cfg.domains.size(); ++d) {
    for (std::size_t i = 0; i < cfg.per_domain_count[d]; ++i) {
      const auto index = manifest.records.size();
      manifest.records.push_back(
          SampleRecord{image_relpath(cfg.domains[d].domain_id, index), {}, cfg.domains[d].domain_id,
                       derive_seed(cfg.seed, index)});
    }
  }
  std::vector<const DomainSpec*> spec_of(manifest.records.size());
  {
    std::size_t k = 0;
    for (std::size_t d = 0; d < cfg.domains.size(); ++d)
      for (std::size_t i = 0; i < cfg.per_domain_count[d]; ++i) spec_of[k++] = &cfg.domains[d];
  }
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      auto& r = manifest.records[i];
      const auto content =
          render_content(cfg.image_size, cfg.num_classes, cfg.class_probability, r.seed, cfg.max_placement_retries);
      r.labels = content.labels;
      write_png(root / r.path, apply_domain_style(content, *spec_of[i], r.seed));
    }
  };
  const auto n = manifest.records.size();
  const auto threads = std::max<std::size_t>(1, std::min(cfg.threads, n));
  if (threads == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          work(n * t / threads, n * (t + 1) / threads);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// Preprocessing

enum class Mode { train, eval };

struct PreprocessConfig {
  std::size_t resize_to = 72;
  std::size_t crop_to = 64;
  double hflip_prob = 0.5;
  /// Intensity normalization on the 0-255 scale; corpus statistics by default
  /// (filled in by the trainer when left at 0/0).
  double normalize_mean = 0.0;
  double normalize_std = 0.0;

  void validate() const {
    if (crop_to == 0 || crop_to > resize_to) throw DomainError("preprocess: need 0 < crop_to <= resize_to");
    if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw DomainError("preprocess: hflip_prob must lie in [0,1]");
  }
  bool has_normalization() const { return normalize_std > 0.0; }
};

/// Bilinear resize (pixel-centre aligned) to size x size, on a double grid.
inline std::vector<double> resize_bilinear(const GrayImage& img, std::size_t size) {
  std::vector<double> out(size * size);
  if (img.width == size && img.height == size) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.pixels[i];
    return out;
  }
  const double sx = static_cast<double>(img.width) / static_cast<double>(size);
  const double sy = static_cast<double>(img.height) / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const auto y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const auto x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = (1.0 - wx) * img.at(y0, x0) + wx * img.at(y0, x1);
      const double bot = (1.0 - wx) * img.at(y1, x0) + wx * img.at(y1, x1);
      out[y * size + x] = (1.0 - wy) * top + wy * bot;
    }
  }
  return out;
}

struct CropWindow {
  std::size_t top = 0;
  std::size_t left = 0;
  bool flip = false;
};

template <typename T>
struct Preprocessed {
  Tensor<T> raw;         // [1, crop, crop], 0-255 scale
  Tensor<T> normalized;  // (raw - mean) / std
  CropWindow window;
};

template <typename T>
Tensor<T> normalize_intensity(const Tensor<T>& raw, double mean, double std) {
  if (!(std > 0.0)) throw DomainError("normalize: std must be positive");
  std::vector<T> out(raw.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>((static_cast<double>(raw[i]) - mean) / std);
  return Tensor<T>(raw.shape(), std::move(out));
}

/// resize -> (train: random crop + horizontal flip | eval: centre crop).
/// Returns the raw-scale crop (where image-level style randomization acts)
/// and its normalized version.
template <typename T>
Preprocessed<T> preprocess(const GrayImage& img, const PreprocessConfig& cfg, Mode mode, Rng& rng) {
  cfg.validate();
  if (!cfg.has_normalization()) throw DomainError("preprocess: normalization statistics not set");
  if (img.width == 0 || img.height == 0) throw IoError("preprocess: empty image");
  const auto grid = resize_bilinear(img, cfg.resize_to);
  const auto span = cfg.resize_to - cfg.crop_to;
  CropWindow w;
  if (mode == Mode::train) {
    w.top = span ? uniform_index(rng, span + 1) : 0;
    w.left = span ? uniform_index(rng, span + 1) : 0;
    w.flip = cfg.hflip_prob > 0.0 && uniform(rng, 0.0, 1.0) < cfg.hflip_prob;
  } else {
    w.top = span / 2;
    w.left = span / 2;
  }
  const auto c = cfg.crop_to;
  std::vector<T> raw(c * c);
  for (std::size_t y = 0; y < c; ++y)
    for (std::size_t x = 0; x < c; ++x) {
      const auto sx = w.flip ? c - 1 - x : x;
      raw[y * c + x] = static_cast<T>(grid[(w.top + y) * cfg.resize_to + w.left + sx]);
    }
  Tensor<T> raw_t({1, c, c}, std::move(raw));
  auto norm = normalize_intensity(raw_t, cfg.normalize_mean, cfg.normalize_std);
  return {raw_t, norm, w};
}

template <typename T>
Preprocessed<T> preprocess(const fs::path& image_file, const PreprocessConfig& cfg, Mode mode, Rng& rng) {
  return preprocess<T>(read_png(image_file), cfg, mode, rng);
}

/// Decoded images of a manifest, in record order.
struct ImageStore {
  std::vector<GrayImage> images;

  static ImageStore load(const DatasetManifest& manifest, const fs::path& root) {
    ImageStore s;
    s.images.reserve(manifest.records.size());
    for (const auto& r : manifest.records) s.images.push_back(read_png(root / r.path));
    return s;
  }
};

/// Pixel mean and standard deviation over a set of images.
inline std::pair<double, double> corpus_intensity_stats(const ImageStore& store) {
  double sum = 0.0, sq = 0.0, n = 0.0;
  for (const auto& img : store.images)
    for (const auto p : img.pixels) {
      sum += p;
      sq += static_cast<double>(p) * p;
      n += 1.0;
    }
  if (n == 0.0) throw DomainError("corpus_intensity_stats: no pixels");
  const double mean = sum / n;
  return {mean, std::sqrt(std::max(sq / n - mean * mean, 0.0))};
}

// ---------------------------------------------------------------------------
// Image-level statistics report

struct ImageStatsRow {
  std::string path;
  int domain = 0;
  double mean = 0.0;
  double std = 0.0;
};

struct DomainSummary {
  int domain = 0;
  std::size_t count = 0;
  double centroid_mean = 0.0;
  double centroid_std = 0.0;
  double rms_spread = 0.0;  // sqrt(mean squared distance to the centroid)
};

struct StatsReport {
  std::vector<ImageStatsRow> rows;
  std::vector<DomainSummary> domains;
  std::vector<std::tuple<int, int, double>> centroid_distances;
  double mean_spread = 0.0;
  double min_centroid_distance = 0.0;
  double nearest_centroid_accuracy = 0.0;
  std::vector<std::string> errors;
};

/// Per-image (mean, std) on the raw 0-255 scale, grouped by domain.
inline StatsReport stats_report(const DatasetManifest& manifest, const fs::path& root,
                                double epsilon = kStyleEpsilon) {
  StatsReport rep;
  for (const auto& r : manifest.records) {
    try {
      const auto img = read_png(root / r.path);
      std::vector<double> v(img.pixels.begin(), img.pixels.end());
      const auto st = channel_stats(Tensor<double>({1, img.height, img.width}, std::move(v)), epsilon);
      rep.rows.push_back({r.path, r.domain, st.mean[0], st.std[0]});
    } catch (const Error& e) {
      rep.errors.push_back(e.what());
    }
  }
  std::map<int, DomainSummary> by_domain;
  for (const auto& row : rep.rows) {
    auto& d = by_domain[row.domain];
    d.domain = row.domain;
    ++d.count;
    d.centroid_mean += row.mean;
    d.centroid_std += row.std;
  }
  for (auto& [id, d] : by_domain) {
    d.centroid_mean /= static_cast<double>(d.count);
    d.centroid_std /= static_cast<double>(d.count);
  }
  for (const auto& row : rep.rows) {
    auto& d = by_domain[row.domain];
    const double dm = row.mean - d.centroid_mean, ds = row.std - d.centroid_std;
    d.rms_spread += dm * dm + ds * ds;
  }
  for (auto& [id, d] : by_domain) {
    d.rms_spread = std::sqrt(d.rms_spread / static_cast<double>(d.count));
    rep.domains.push_back(d);
    rep.mean_spread += d.rms_spread;
  }
  if (!rep.domains.empty()) rep.mean_spread /= static_cast<double>(rep.domains.size());
  rep.min_centroid_distance = rep.domains.size() > 1 ? std::numeric_limits<double>::infinity() : 0.0;
  for (std::size_t i = 0; i < rep.domains.size(); ++i)
    for (std::size_t j = i + 1; j < rep.domains.size(); ++j) {
      const auto& a = rep.domains[i];
      const auto& b = rep.domains[j];
      const double dist = std::hypot(a.centroid_mean - b.centroid_mean, a.centroid_std - b.centroid_std);
      rep.centroid_distances.emplace_back(a.domain, b.domain, dist);
      rep.min_centroid_distance = std::min(rep.min_centroid_distance, dist);
    }
  std::size_t correct = 0;
  for (const auto& row : rep.rows) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& d : rep.domains) {
      const double dist = std::hypot(row.mean - d.centroid_mean, row.std - d.centroid_std);
      if (dist < best_d) {
        best_d = dist;
        best = d.domain;
      }
    }
    correct += best == row.domain;
  }
  rep.nearest_centroid_accuracy =
      rep.rows.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(rep.rows.size());
  return rep;
}

inline void write_stats_csv(const StatsReport& rep, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("stats: cannot open " + path.string());
  os << "path,domain,mean,std\n";
  os.precision(10);
  for (const auto& r : rep.rows) os << r.path << ',' << r.domain << ',' << r.mean << ',' << r.std << '\n';
}

inline nlohmann::json stats_summary_json(const StatsReport& rep) {
  nlohmann::json j;
  j["domains"] = nlohmann::json::array();
  for (const auto& d : rep.domains) {
    j["domains"].push_back({{"domain", d.domain},
                            {"count", d.count},
                            {"centroid", {d.centroid_mean, d.centroid_std}},
                            {"rms_spread", d.rms_spread}});
  }
  j["centroid_distances"] = nlohmann::json::array();
  for (const auto& [a, b, dist] : rep.centroid_distances) {
    j["centroid_distances"].push_back({{"a", a}, {"b", b}, {"distance", dist}});
  }
  j["mean_within_domain_spread"] = rep.mean_spread;
  j["min_centroid_distance"] = rep.min_centroid_distance;
  j["separation_ratio"] = rep.mean_spread > 0.0 ? rep.min_centroid_distance / rep.mean_spread : 0.0;
  j["nearest_centroid_accuracy"] = rep.nearest_centroid_accuracy;
  j["errors"] = rep.errors;
  return j;
}

}  // namespace dgstyle
