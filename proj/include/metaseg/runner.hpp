#pragma once

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "metaseg/checkpoint.hpp"
#include "metaseg/dataset.hpp"
#include "metaseg/eval.hpp"
#include "metaseg/manifest.hpp"
#include "metaseg/metatrain.hpp"
#include "metaseg/png_io.hpp"

namespace metaseg {

// Fixed class palette for overlays; cycles past its length.
inline std::array<std::uint8_t, 3> class_color(std::int32_t cls) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 12> kPalette = {{
      {0, 0, 0},        // background
      {230, 25, 75},    // red
      {60, 180, 75},    // green
      {255, 225, 25},   // yellow
      {0, 130, 200},    // blue
      {245, 130, 48},   // orange
      {145, 30, 180},   // purple
      {70, 240, 240},   // cyan
      {240, 50, 230},   // magenta
      {210, 245, 60},   // lime
      {250, 190, 212},  // pink
      {128, 128, 128},  // gray
  }};
  return kPalette[static_cast<std::size_t>(cls) % kPalette.size()];
}

inline std::optional<std::int32_t> class_of_color(std::uint8_t r, std::uint8_t g, std::uint8_t b,
                                                  std::int32_t num_classes) {
  for (std::int32_t k = 0; k < num_classes; ++k) {
    const auto c = class_color(k);
    if (c[0] == r && c[1] == g && c[2] == b) return k;
  }
  return std::nullopt;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Writes one synthetic source directory per (K, n) spec entry in the
// dataset on-disk format; byte-deterministic per seed.
template <typename Real>
std::vector<std::string> run_synth(std::uint64_t seed, const std::vector<std::pair<std::int32_t, std::int64_t>>& spec,
                                   std::int64_t size, const std::filesystem::path& out_dir) {
  if (spec.empty()) throw ConfigError("synth: empty source spec");
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto [k, n] = spec[i];
    const std::string id = "s" + std::to_string(i) + "_k" + std::to_string(k);
    auto src = generate_synthetic_source<Real>(mix_seed(seed, static_cast<std::uint64_t>(i)), k, n, size, size, id);
    export_source(src, out_dir / id);
    ids.push_back(id);
  }
  return ids;
}

template <typename Real>
struct RunOutcome {
  ParamSet<Real> params;
  double miou = -1.0;  // refine/eval modes only
  std::filesystem::path checkpoint_path;
};

namespace detail {

template <typename Real>
std::vector<std::string> resolve_sources(const RunManifest& m, const MetaDataset<Real>& meta) {
  std::vector<std::string> ids = m.sources;
  if (ids.empty())
    for (const auto& s : meta.sources) ids.push_back(s.id);
  for (const auto& id : ids)
    if (!meta.has_source(id)) throw ConfigError("manifest lists unknown source '" + id + "'");
  return ids;
}

inline TaskDistribution resolve_distribution(const RunManifest& m, const std::vector<std::string>& ids) {
  if (m.distribution.empty()) return TaskDistribution::uniform(ids);
  TaskDistribution d;
  for (const auto& id : ids) {
    const auto it = m.distribution.find(id);
    d.weights.push_back({id, it == m.distribution.end() ? 0.0 : it->second});
  }
  d.validate();
  return d;
}

class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& dir)
      : metrics_(dir / "metrics.tsv"), timings_(dir / "timings.tsv") {
    if (!metrics_ || !timings_) throw IoError("cannot open metrics files under '" + dir.string() + "'");
    metrics_ << "iter\tloss\n";
    timings_ << "iter\twall_ms\n";
    start_ = std::chrono::steady_clock::now();
  }

  void record(std::int64_t iter, double loss) {
    const auto now = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(now - start_).count();
    metrics_ << iter << "\t" << format_double(loss) << "\n";
    timings_ << iter << "\t" << format_double(ms) << "\n";
  }

 private:
  std::ofstream metrics_;
  std::ofstream timings_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

// Executes one manifest: pretraining (maml/transfer), refinement, or
// evaluation. Writes the resolved manifest, metrics, and checkpoint into the
// manifest's output directory.
template <typename Real>
RunOutcome<Real> run_manifest(const RunManifest& manifest, std::ostream& log) {
  manifest.validate();
  const std::filesystem::path out_dir = manifest.output;
  const bool writes_output = manifest.mode != "eval";
  if (writes_output) {
    std::filesystem::create_directories(out_dir);
    manifest.save(out_dir / "manifest.json");
  }

  auto meta = load_meta_dataset<Real>(manifest.dataset, manifest.split_fractions, manifest.split_seed);
  const int workers = manifest.workers;

  if (manifest.mode == "eval") {
    auto params = load_checkpoint<Real>(manifest.eval_checkpoint);
    const auto& task = meta.source(manifest.eval_task);
    const auto& split = meta.splits.at(task.id);
    const auto& idx = manifest.eval_split == "train" ? split.train
                      : manifest.eval_split == "val" ? split.val
                                                     : split.test;
    RunOutcome<Real> out{std::move(params), 0.0, manifest.eval_checkpoint};
    out.miou = evaluate_task(out.params, task, idx);
    log << "miou\t" << detail::format_double(out.miou) << "\n";
    return out;
  }

  if (manifest.mode == "refine") {
    auto pretrained = load_checkpoint<Real>(manifest.refine_checkpoint);
    const auto& task = meta.source(manifest.refine_task);
    const auto& split = meta.splits.at(task.id);
    auto result = refine_on_new_task(pretrained, task, split, manifest.refine, manifest.augment, manifest.seed);

    detail::MetricsWriter metrics(out_dir);
    for (std::size_t i = 0; i < result.losses.size(); ++i)
      metrics.record(static_cast<std::int64_t>(i + 1), result.losses[i]);
    const auto ckpt = out_dir / "checkpoint.ckpt";
    save_checkpoint(result.params, ckpt);
    nlohmann::json rj = {{"task", task.id}, {"miou", result.miou}, {"manifest_hash", manifest.hash()}};
    std::ofstream(out_dir / "result.json") << rj.dump(2) << "\n";
    log << "miou\t" << detail::format_double(result.miou) << "\n";
    return {std::move(result.params), result.miou, ckpt};
  }

  // Pretraining modes.
  const auto source_ids = detail::resolve_sources(manifest, meta);
  detail::MetricsWriter metrics(out_dir);
  TrainHooks<Real> hooks;
  hooks.on_metrics = [&](std::int64_t iter, double loss) { metrics.record(iter, loss); };
  hooks.checkpoint_every = manifest.checkpoint_every;
  hooks.on_checkpoint = [&](std::int64_t iter, const ParamSet<Real>& p) {
    char name[48];
    std::snprintf(name, sizeof(name), "checkpoint_%06lld.ckpt", static_cast<long long>(iter));
    save_checkpoint(p, out_dir / name);
  };

  ParamSet<Real> params;
  if (manifest.mode == "maml") {
    const auto dist = detail::resolve_distribution(manifest, source_ids);
    params = train_maml(meta, dist, manifest.sampler, manifest.augment, manifest.model, manifest.maml,
                        manifest.seed, workers, hooks);
  } else {
    params = train_transfer(meta, source_ids, manifest.sampler, manifest.augment, manifest.model,
                            manifest.transfer, manifest.seed, workers, hooks);
  }
  const auto ckpt = out_dir / "checkpoint.ckpt";
  save_checkpoint(params, ckpt);
  return {std::move(params), -1.0, ckpt};
}

// Evaluation entry used by the `eval` subcommand.
template <typename Real>
double run_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
                const std::string& task_id, const std::string& split_name, const std::vector<double>& fractions,
                std::uint64_t split_seed) {
  auto params = load_checkpoint<Real>(checkpoint);
  auto meta = load_meta_dataset<Real>(dataset, fractions, split_seed);
  const auto& task = meta.source(task_id);
  const auto& split = meta.splits.at(task_id);
  const auto& idx = split_name == "train" ? split.train : split_name == "val" ? split.val : split.test;
  return evaluate_task(params, task, idx);
}

// ---------------------------------------------------------------------------
// Experiment matrix: rows = held-out tasks, column groups = "all" plus each
// single predecessor source, two trainers per group. NA on the diagonal.
// ---------------------------------------------------------------------------

struct ResultGrid {
  std::vector<std::string> rows;       // held-out task per row
  std::vector<std::string> colgroups;  // "all" + single sources
  static constexpr double kNA = -1.0;
  std::map<std::string, double> cells;  // key: row|col|method

  static std::string key(const std::string& row, const std::string& col, const std::string& method) {
    return row + "|" + col + "|" + method;
  }
  double at(const std::string& row, const std::string& col, const std::string& method) const {
    const auto it = cells.find(key(row, col, method));
    return it == cells.end() ? kNA : it->second;
  }

  std::string to_tsv() const {
    std::ostringstream os;
    os << "task";
    for (const auto& c : colgroups) os << "\t" << c << ":maml\t" << c << ":transfer";
    os << "\n";
    for (const auto& r : rows) {
      os << r;
      for (const auto& c : colgroups)
        for (const std::string method : {"maml", "transfer"}) {
          const double v = at(r, c, method);
          os << "\t" << (v < 0 ? "NA" : detail::format_double(v));
        }
      os << "\n";
    }
    return os.str();
  }

  // Aligned text table; the better method of each (row, column-group) pair
  // is starred.
  std::string to_text() const {
    std::ostringstream os;
    const int name_w = 18, cell_w = 11;
    os << std::left << std::setw(name_w) << "new task";
    for (const auto& c : colgroups)
      os << std::setw(2 * cell_w) << (c + "  [maml | transfer]");
    os << "\n";
    for (const auto& r : rows) {
      os << std::left << std::setw(name_w) << r;
      for (const auto& c : colgroups) {
        const double m = at(r, c, "maml"), t = at(r, c, "transfer");
        auto fmt = [&](double v, bool star) {
          if (v < 0) return std::string("NA");
          char buf[32];
          std::snprintf(buf, sizeof(buf), "%.4f%s", v, star ? "*" : "");
          return std::string(buf);
        };
        os << std::setw(cell_w) << fmt(m, m >= 0 && m >= t) << std::setw(cell_w) << fmt(t, t >= 0 && t > m);
      }
      os << "\n";
    }
    return os.str();
  }
};

struct MatrixJob {
  std::string row;     // held-out task
  std::string col;     // "all" or a single source id
  std::string method;  // maml | transfer
};

// Derives the exact manifests a user would write for one cell, so a matrix
// cell and a hand-composed train+refine+eval pipeline are interchangeable.
inline std::pair<RunManifest, RunManifest> matrix_cell_manifests(const RunManifest& base,
                                                                 const std::filesystem::path& dataset,
                                                                 const std::filesystem::path& cell_dir,
                                                                 const std::vector<std::string>& all_sources,
                                                                 const MatrixJob& job) {
  const std::uint64_t cell_seed = mix_seed(base.seed, fnv1a64(job.row + "|" + job.col + "|" + job.method));

  RunManifest pre = base;
  pre.mode = job.method;
  pre.dataset = dataset.string();
  pre.output = (cell_dir / "pretrain").string();
  pre.seed = cell_seed;
  pre.sampler.seed = mix_seed(cell_seed, fnv1a64("sampler"));
  pre.distribution.clear();
  pre.sources.clear();
  if (job.col == "all") {
    for (const auto& id : all_sources)
      if (id != job.row) pre.sources.push_back(id);
  } else {
    pre.sources.push_back(job.col);
  }

  RunManifest ref = base;
  ref.mode = "refine";
  ref.dataset = dataset.string();
  ref.output = (cell_dir / "refine").string();
  ref.seed = mix_seed(cell_seed, fnv1a64("refine"));
  ref.refine.head_seed = mix_seed(cell_seed, fnv1a64("head"));
  ref.refine_checkpoint = (cell_dir / "pretrain" / "checkpoint.ckpt").string();
  ref.refine_task = job.row;
  return {pre, ref};
}

// Runs the full pretrain -> refine -> evaluate grid. Cells are independent
// jobs with per-cell directories; a cell whose result.json already exists is
// reused, which makes interrupted grids resumable.
template <typename Real>
ResultGrid run_matrix(const std::filesystem::path& dataset, const RunManifest& base,
                      const std::filesystem::path& out_dir, int jobs, std::ostream& log) {
  auto meta = load_meta_dataset<Real>(dataset, base.split_fractions, base.split_seed);
  std::vector<std::string> all_sources;
  for (const auto& s : meta.sources) all_sources.push_back(s.id);
  if (all_sources.size() < 3) throw ConfigError("matrix: need at least 3 sources, found " +
                                                std::to_string(all_sources.size()));

  ResultGrid grid;
  grid.rows = all_sources;
  grid.colgroups.push_back("all");
  for (const auto& id : all_sources) grid.colgroups.push_back(id);

  std::vector<MatrixJob> todo;
  for (const auto& row : grid.rows)
    for (const auto& col : grid.colgroups) {
      if (col == row) continue;  // NA diagonal
      for (const std::string method : {"maml", "transfer"}) todo.push_back({row, col, method});
    }

  std::filesystem::create_directories(out_dir / "cells");
  std::vector<double> scores(todo.size(), ResultGrid::kNA);
  parallel_for(static_cast<std::int64_t>(todo.size()), jobs, [&](std::int64_t i) {
    const MatrixJob& job = todo[static_cast<std::size_t>(i)];
    const auto cell_dir = out_dir / "cells" / (job.row + "__" + job.col + "__" + job.method);
    const auto result_path = cell_dir / "refine" / "result.json";
    if (std::filesystem::exists(result_path)) {
      std::ifstream in(result_path);
      nlohmann::json j;
      in >> j;
      scores[static_cast<std::size_t>(i)] = j.at("miou").get<double>();
      return;
    }
    std::filesystem::create_directories(cell_dir);
    auto [pre, ref] = matrix_cell_manifests(base, dataset, cell_dir, all_sources, job);
    pre.save(cell_dir / "pretrain_manifest.json");
    ref.save(cell_dir / "refine_manifest.json");
    std::ostringstream sink;
    run_manifest<Real>(pre, sink);
    auto outcome = run_manifest<Real>(ref, sink);
    scores[static_cast<std::size_t>(i)] = outcome.miou;
  });

  for (std::size_t i = 0; i < todo.size(); ++i)
    grid.cells[ResultGrid::key(todo[i].row, todo[i].col, todo[i].method)] = scores[i];

  std::ofstream(out_dir / "grid.tsv") << grid.to_tsv();
  std::ofstream(out_dir / "grid.txt") << grid.to_text();
  log << grid.to_text();
  return grid;
}

// ---------------------------------------------------------------------------
// Prediction overlay: input | color-coded truth | color-coded prediction.
// ---------------------------------------------------------------------------

template <typename Real>
void run_overlay(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
                 const std::string& task_id, std::int64_t index, const std::filesystem::path& out_path,
                 const std::vector<double>& fractions, std::uint64_t split_seed) {
  auto params = load_checkpoint<Real>(checkpoint);
  auto meta = load_meta_dataset<Real>(dataset, fractions, split_seed);
  const auto& task = meta.source(task_id);
  if (index < 0 || index >= static_cast<std::int64_t>(task.samples.size()))
    throw ConfigError("overlay: sample index " + std::to_string(index) + " outside [0," +
                      std::to_string(task.samples.size()) + ")");

  const auto sample = center_crop_to_multiple(task.samples[static_cast<std::size_t>(index)],
                                              params.config.spatial_multiple());
  Tensor<Real> batch({1, sample.channels(), sample.height(), sample.width()});
  batch.data = sample.image.data;
  const IntMask pred = argmax_mask(forward_logits(params, task_id, batch));

  const int h = static_cast<int>(sample.height()), w = static_cast<int>(sample.width());
  ImageU8 strip;
  strip.width = 3 * w;
  strip.height = h;
  strip.channels = 3;
  strip.data.assign(static_cast<std::size_t>(strip.width) * strip.height * 3, 0);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const std::int64_t src_c = sample.channels() == 3 ? c : 0;
        const double v = std::clamp(static_cast<double>(sample.image.data[static_cast<std::size_t>(src_c * plane + y * w + x)]),
                                    0.0, 1.0);
        strip.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
      const auto truth_color = class_color(sample.mask.data[static_cast<std::size_t>(y * w + x)]);
      const auto pred_color = class_color(pred.data[static_cast<std::size_t>(y * w + x)]);
      for (int c = 0; c < 3; ++c) {
        strip.at(y, w + x, c) = truth_color[static_cast<std::size_t>(c)];
        strip.at(y, 2 * w + x, c) = pred_color[static_cast<std::size_t>(c)];
      }
    }
  }
  write_png(out_path, strip);
}

}  // namespace metaseg
