#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaseg/errors.hpp"
#include "metaseg/png_io.hpp"
#include "metaseg/rng.hpp"
#include "metaseg/tensor.hpp"

namespace metaseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

// One image plus its per-pixel class mask, in the unified format every
// source is normalized into: float image in [0,1], C x H x W.
template <typename Real>
struct Sample {
  Tensor<Real> image;  // [C,H,W]
  IntMask mask;        // [H,W]
  std::string source_id;

  std::int64_t channels() const { return image.dim(0); }
  std::int64_t height() const { return image.dim(1); }
  std::int64_t width() const { return image.dim(2); }
};

// A named segmentation task: its class vocabulary and samples. The unit of
// task identity for meta-learning.
template <typename Real>
struct TaskSource {
  std::string id;
  std::string name;
  std::int32_t num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<Sample<Real>> samples;
};

struct SplitAssignment {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> val;
  std::vector<std::int64_t> test;
};

template <typename Real>
struct MetaDataset {
  std::vector<TaskSource<Real>> sources;
  std::map<std::string, SplitAssignment> splits;

  const TaskSource<Real>& source(const std::string& id) const {
    for (const auto& s : sources)
      if (s.id == id) return s;
    throw LookupError("unknown source '" + id + "'");
  }
  bool has_source(const std::string& id) const {
    for (const auto& s : sources)
      if (s.id == id) return true;
    return false;
  }
};

// Validates every mask value against K; message reports the violation count.
template <typename Real>
inline void validate_sample_labels(const Sample<Real>& s, std::int32_t k, const std::string& what) {
  std::int64_t violations = 0;
  std::int32_t worst = 0;
  for (const std::int32_t v : s.mask.data)
    if (v < 0 || v >= k) {
      ++violations;
      worst = v;
    }
  if (violations > 0)
    throw LabelRangeError("sample '" + what + "': " + std::to_string(violations) + " mask pixels outside [0," +
                          std::to_string(k) + ") (e.g. value " + std::to_string(worst) + ")");
}

// Paints each pixel with the class of the nearest covering centroid disk;
// ties go to the centroid earlier in the list, uncovered pixels get the
// background class.
struct Centroid {
  double x = 0;
  double y = 0;
  std::int32_t cls = 0;
};

inline IntMask rasterize_centroids(const std::vector<Centroid>& centroids, double radius, std::int64_t height,
                                   std::int64_t width, std::int32_t background_class, std::int32_t num_classes) {
  if (radius < 1.0) throw ConfigError("rasterize_centroids: radius must be >= 1");
  for (std::size_t i = 0; i < centroids.size(); ++i)
    if (centroids[i].cls < 0 || centroids[i].cls >= num_classes)
      throw LabelRangeError("centroid " + std::to_string(i) + " class " + std::to_string(centroids[i].cls) +
                            " outside [0," + std::to_string(num_classes) + ")");

  IntMask mask({height, width});
  std::fill(mask.data.begin(), mask.data.end(), background_class);
  std::vector<double> best(static_cast<std::size_t>(height * width), std::numeric_limits<double>::infinity());
  const double r2 = radius * radius;
  for (const auto& c : centroids) {
    const std::int64_t y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(c.y - radius)));
    const std::int64_t y1 = std::min(height - 1, static_cast<std::int64_t>(std::ceil(c.y + radius)));
    const std::int64_t x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(c.x - radius)));
    const std::int64_t x1 = std::min(width - 1, static_cast<std::int64_t>(std::ceil(c.x + radius)));
    for (std::int64_t y = y0; y <= y1; ++y) {
      for (std::int64_t x = x0; x <= x1; ++x) {
        const double dy = static_cast<double>(y) - c.y;
        const double dx = static_cast<double>(x) - c.x;
        const double d2 = dy * dy + dx * dx;
        if (d2 <= r2 && d2 < best[static_cast<std::size_t>(y * width + x)]) {
          best[static_cast<std::size_t>(y * width + x)] = d2;
          mask.data[static_cast<std::size_t>(y * width + x)] = c.cls;
        }
      }
    }
  }
  return mask;
}

// Per-pixel majority vote across annotators; ties resolve to the lowest
// class id among the tied classes.
inline IntMask fuse_annotations(const std::vector<IntMask>& masks, std::int32_t num_classes) {
  if (masks.empty()) throw ContractError("fuse_annotations: need at least one mask");
  for (const auto& m : masks) require_same_shape(m.shape, masks[0].shape, "fuse_annotations");
  IntMask out(masks[0].shape);
  std::vector<std::int32_t> counts(static_cast<std::size_t>(num_classes));
  for (std::int64_t px = 0; px < out.numel(); ++px) {
    std::fill(counts.begin(), counts.end(), 0);
    for (const auto& m : masks) {
      const std::int32_t v = m.data[static_cast<std::size_t>(px)];
      if (v < 0 || v >= num_classes)
        throw LabelRangeError("fuse_annotations: value " + std::to_string(v) + " outside [0," +
                              std::to_string(num_classes) + ") at flat pixel " + std::to_string(px));
      ++counts[static_cast<std::size_t>(v)];
    }
    std::int32_t best_cls = 0;
    std::int32_t best_count = counts[0];
    for (std::int32_t k = 1; k < num_classes; ++k)
      if (counts[static_cast<std::size_t>(k)] > best_count) {
        best_count = counts[static_cast<std::size_t>(k)];
        best_cls = k;
      }
    out.data[static_cast<std::size_t>(px)] = best_cls;
  }
  return out;
}

namespace detail {

inline json load_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IngestError("bad JSON in '" + path.string() + "': " + e.what());
  }
  return j;
}

template <typename Real>
Tensor<Real> image_to_tensor(const ImageU8& img) {
  Tensor<Real> t({img.channels, img.height, img.width});
  const std::int64_t plane = static_cast<std::int64_t>(img.height) * img.width;
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        t.data[static_cast<std::size_t>(c * plane + y * img.width + x)] =
            static_cast<Real>(img.at(static_cast<int>(y), static_cast<int>(x), c)) / Real(255);
  return t;
}

template <typename Real>
ImageU8 tensor_to_image(const Tensor<Real>& t) {
  ImageU8 img;
  img.channels = static_cast<int>(t.dim(0));
  img.height = static_cast<int>(t.dim(1));
  img.width = static_cast<int>(t.dim(2));
  img.data.resize(static_cast<std::size_t>(img.channels) * img.height * img.width);
  const std::int64_t plane = static_cast<std::int64_t>(img.height) * img.width;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        const double v = std::clamp(static_cast<double>(t.data[static_cast<std::size_t>(c * plane + y * img.width + x)]),
                                    0.0, 1.0);
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

}  // namespace detail

// Loads a source directory: manifest.json plus images/ and masks/ PNGs.
// Samples whose manifest entry omits the mask must carry a centroid record;
// their masks are rasterized.
template <typename Real>
TaskSource<Real> ingest_source(const fs::path& dir) {
  const json manifest = detail::load_json_file(dir / "manifest.json");
  TaskSource<Real> src;
  try {
    src.name = manifest.at("name").get<std::string>();
    src.num_classes = manifest.at("num_classes").get<std::int32_t>();
    src.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw IngestError("manifest '" + (dir / "manifest.json").string() + "': " + e.what());
  }
  src.id = src.name;
  if (src.num_classes < 2) throw IngestError("source '" + src.name + "': num_classes must be >= 2");
  if (static_cast<std::int32_t>(src.class_names.size()) != src.num_classes)
    throw IngestError("source '" + src.name + "': class_names length != num_classes");

  // Optional centroid records, keyed by image path.
  struct CentroidRecord {
    std::vector<Centroid> points;
    double radius = 12.0;
  };
  std::map<std::string, CentroidRecord> centroid_records;
  if (manifest.contains("centroids")) {
    for (const auto& rec : manifest.at("centroids")) {
      CentroidRecord r;
      r.radius = rec.value("radius", 12.0);
      for (const auto& p : rec.at("points"))
        r.points.push_back({p.at("x").get<double>(), p.at("y").get<double>(), p.at("class").get<std::int32_t>()});
      centroid_records[rec.at("image").get<std::string>()] = std::move(r);
    }
  }

  if (!manifest.contains("samples") || manifest.at("samples").empty())
    throw IngestError("source '" + src.name + "': manifest lists no samples");
  for (const auto& entry : manifest.at("samples")) {
    const std::string image_rel = entry.at("image").get<std::string>();
    const fs::path image_path = dir / image_rel;
    if (!fs::exists(image_path)) throw IngestError("missing image file '" + image_path.string() + "'");
    const ImageU8 img = read_png(image_path);

    Sample<Real> s;
    s.source_id = src.id;
    s.image = detail::image_to_tensor<Real>(img);

    if (entry.contains("mask")) {
      const fs::path mask_path = dir / entry.at("mask").get<std::string>();
      if (!fs::exists(mask_path)) throw IngestError("missing mask file '" + mask_path.string() + "'");
      const ImageU8 m = read_png(mask_path);
      if (m.channels != 1)
        throw IngestError("mask '" + mask_path.string() + "' must be single-channel, got " +
                          std::to_string(m.channels));
      if (m.width != img.width || m.height != img.height)
        throw IngestError("mask '" + mask_path.string() + "' is " + std::to_string(m.width) + "x" +
                          std::to_string(m.height) + " but image is " + std::to_string(img.width) + "x" +
                          std::to_string(img.height));
      s.mask = IntMask({m.height, m.width});
      for (std::size_t i = 0; i < m.data.size(); ++i) s.mask.data[i] = static_cast<std::int32_t>(m.data[i]);
    } else {
      auto it = centroid_records.find(image_rel);
      if (it == centroid_records.end())
        throw IngestError("sample '" + image_rel + "' has neither a mask nor a centroid record");
      s.mask = rasterize_centroids(it->second.points, it->second.radius, img.height, img.width, 0, src.num_classes);
    }
    validate_sample_labels(s, src.num_classes, image_rel);
    src.samples.push_back(std::move(s));
  }
  return src;
}

// Writes a source in the on-disk layout ingest_source reads. Images are
// quantized to 8-bit, so export(ingest(dir)) round-trips bitwise.
template <typename Real>
void export_source(const TaskSource<Real>& src, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "masks", ec);
  json manifest;
  manifest["name"] = src.name;
  manifest["num_classes"] = src.num_classes;
  manifest["class_names"] = src.class_names;
  json samples = json::array();
  for (std::size_t i = 0; i < src.samples.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04zu.png", i);
    const std::string image_rel = std::string("images/") + buf;
    const std::string mask_rel = std::string("masks/") + buf;
    write_png(dir / image_rel, detail::tensor_to_image(src.samples[i].image));
    ImageU8 m;
    m.channels = 1;
    m.height = static_cast<int>(src.samples[i].mask.dim(0));
    m.width = static_cast<int>(src.samples[i].mask.dim(1));
    m.data.resize(src.samples[i].mask.data.size());
    for (std::size_t px = 0; px < m.data.size(); ++px) {
      const std::int32_t v = src.samples[i].mask.data[px];
      if (v < 0 || v > 255) throw ContractError("mask value " + std::to_string(v) + " not storable as 8-bit");
      m.data[px] = static_cast<std::uint8_t>(v);
    }
    write_png(dir / mask_rel, m);
    samples.push_back({{"image", image_rel}, {"mask", mask_rel}});
  }
  manifest["samples"] = std::move(samples);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write '" + (dir / "manifest.json").string() + "'");
  out << manifest.dump(2) << "\n";
}

// Synthetic stand-in for a real task source: Voronoi partitions with
// per-class base colors plus Gaussian pixel noise. Deterministic per seed;
// every class in [0,K) appears in at least one sample.
template <typename Real>
TaskSource<Real> generate_synthetic_source(std::uint64_t seed, std::int32_t num_classes, std::int64_t n_samples,
                                           std::int64_t height, std::int64_t width, const std::string& id = "") {
  if (num_classes < 2) throw ConfigError("generate_synthetic_source: K must be >= 2");
  if (n_samples < 2) throw ConfigError("generate_synthetic_source: need at least 2 samples");
  Rng rng(seed);

  TaskSource<Real> src;
  src.id = id.empty() ? ("synth_k" + std::to_string(num_classes) + "_" + std::to_string(seed)) : id;
  src.name = src.id;
  src.num_classes = num_classes;
  for (std::int32_t k = 0; k < num_classes; ++k) src.class_names.push_back("class" + std::to_string(k));

  // Base colors sit on a tight ball around a per-source center: class
  // offsets are small relative to the pixel noise, so telling classes apart
  // needs spatial denoising, not a per-pixel color threshold. Pairwise
  // separation is enforced (with deterministic relaxation) to keep every
  // class pair resolvable after smoothing.
  std::vector<std::array<double, 3>> colors;
  {
    const std::array<double, 3> center = {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7)};
    const double radius = 0.055;
    double min_sep = 0.075;
    for (int attempt = 0;; ++attempt) {
      colors.clear();
      for (std::int32_t k = 0; k < num_classes; ++k) {
        double dir[3];
        double norm = 0;
        do {
          norm = 0;
          for (auto& d : dir) {
            d = rng.uniform(-1.0, 1.0);
            norm += d * d;
          }
        } while (norm < 1e-6 || norm > 1.0);
        norm = std::sqrt(norm);
        colors.push_back({center[0] + radius * dir[0] / norm, center[1] + radius * dir[1] / norm,
                          center[2] + radius * dir[2] / norm});
      }
      double min_d = std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < colors.size(); ++a)
        for (std::size_t b = a + 1; b < colors.size(); ++b) {
          double d = 0;
          for (int c = 0; c < 3; ++c) d += (colors[a][c] - colors[b][c]) * (colors[a][c] - colors[b][c]);
          min_d = std::min(min_d, std::sqrt(d));
        }
      if (min_d >= min_sep) break;
      if (attempt > 0 && attempt % 100 == 0) min_sep *= 0.9;
    }
  }

  struct Site {
    double x, y;
    std::int32_t cls;
  };
  auto render = [&](const std::vector<Site>& sites, Rng& noise_rng) {
    Sample<Real> s;
    s.source_id = src.id;
    s.mask = IntMask({height, width});
    s.image = Tensor<Real>({3, height, width});
    const std::int64_t plane = height * width;
    for (std::int64_t y = 0; y < height; ++y) {
      for (std::int64_t x = 0; x < width; ++x) {
        double best = std::numeric_limits<double>::infinity();
        std::int32_t cls = sites[0].cls;
        for (const auto& site : sites) {
          const double dy = static_cast<double>(y) - site.y;
          const double dx = static_cast<double>(x) - site.x;
          const double d2 = dy * dy + dx * dx;
          if (d2 < best) {
            best = d2;
            cls = site.cls;
          }
        }
        s.mask.data[static_cast<std::size_t>(y * width + x)] = cls;
        for (int c = 0; c < 3; ++c) {
          const double v = colors[static_cast<std::size_t>(cls)][static_cast<std::size_t>(c)] +
                           noise_rng.normal(0.0, 0.05);
          s.image.data[static_cast<std::size_t>(c * plane + y * width + x)] =
              static_cast<Real>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    return s;
  };

  std::vector<std::vector<Site>> all_sites(static_cast<std::size_t>(n_samples));
  for (std::int64_t i = 0; i < n_samples; ++i) {
    const std::int64_t n_sites = 2 + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(num_classes - 1)));
    for (std::int64_t j = 0; j < n_sites; ++j)
      all_sites[static_cast<std::size_t>(i)].push_back(
          {rng.uniform(0.0, static_cast<double>(width)), rng.uniform(0.0, static_cast<double>(height)),
           static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(num_classes)))});
  }
  // Guarantee coverage: any class missing from every sample gets a site
  // injected into a deterministic sample.
  std::set<std::int32_t> seen;
  for (const auto& sites : all_sites)
    for (const auto& s : sites) seen.insert(s.cls);
  for (std::int32_t k = 0; k < num_classes; ++k)
    if (!seen.count(k))
      all_sites[static_cast<std::size_t>(k % n_samples)].push_back(
          {rng.uniform(0.0, static_cast<double>(width)), rng.uniform(0.0, static_cast<double>(height)), k});

  for (std::int64_t i = 0; i < n_samples; ++i) {
    Rng noise_rng(mix_seed(seed, 0x6e6f697365ull, static_cast<std::uint64_t>(i)));
    src.samples.push_back(render(all_sites[static_cast<std::size_t>(i)], noise_rng));
  }
  return src;
}

// Deterministic shuffled partition by fractions (largest-remainder counts).
inline std::vector<std::vector<std::int64_t>> split_indices(std::int64_t n, const std::vector<double>& fractions,
                                                            std::uint64_t seed) {
  double total = 0;
  for (const double f : fractions) {
    if (f < 0) throw ConfigError("split fractions must be nonnegative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

  std::vector<std::int64_t> counts(fractions.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    counts[i] = static_cast<std::int64_t>(std::floor(exact));
    assigned += counts[i];
    remainders.push_back({exact - std::floor(exact), i});
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::int64_t r = 0; r < n - assigned; ++r) ++counts[remainders[static_cast<std::size_t>(r)].second];
  for (std::size_t i = 0; i < fractions.size(); ++i)
    if (fractions[i] > 0 && counts[i] == 0)
      throw ConfigError("split fraction " + std::to_string(fractions[i]) + " yields an empty split for n=" +
                        std::to_string(n));

  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::int64_t{0});
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<std::vector<std::int64_t>> out(fractions.size());
  std::int64_t pos = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    out[i].assign(order.begin() + pos, order.begin() + pos + counts[i]);
    pos += counts[i];
  }
  return out;
}

template <typename Real>
SplitAssignment split_source(const TaskSource<Real>& src, const std::vector<double>& fractions, std::uint64_t seed) {
  if (fractions.empty() || fractions.size() > 3) throw ConfigError("split_source: expected 1-3 fractions");
  auto parts = split_indices(static_cast<std::int64_t>(src.samples.size()), fractions, seed);
  SplitAssignment a;
  a.train = parts[0];
  if (parts.size() > 1) a.val = parts[1];
  if (parts.size() > 2) a.test = parts[2];
  return a;
}

// Assembles sources plus per-source deterministic splits; split seeds are
// derived from the base seed and each source id.
template <typename Real>
MetaDataset<Real> make_meta_dataset(std::vector<TaskSource<Real>> sources, const std::vector<double>& fractions,
                                    std::uint64_t split_seed) {
  MetaDataset<Real> meta;
  std::set<std::string> ids;
  for (auto& s : sources) {
    if (!ids.insert(s.id).second) throw ConfigError("duplicate source id '" + s.id + "'");
    meta.splits[s.id] = split_source(s, fractions, mix_seed(split_seed, fnv1a64(s.id)));
    meta.sources.push_back(std::move(s));
  }
  return meta;
}

// Ingests every source directory under root (any directory holding a
// manifest.json), sorted by path for determinism.
template <typename Real>
MetaDataset<Real> load_meta_dataset(const fs::path& root, const std::vector<double>& fractions,
                                    std::uint64_t split_seed) {
  if (!fs::exists(root)) throw IngestError("dataset root '" + root.string() + "' does not exist");
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw IngestError("no source directories with manifest.json under '" + root.string() + "'");
  std::vector<TaskSource<Real>> sources;
  for (const auto& d : dirs) sources.push_back(ingest_source<Real>(d));
  return make_meta_dataset(std::move(sources), fractions, split_seed);
}

}  // namespace metaseg
