#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "metaseg/dataset.hpp"
#include "metaseg/errors.hpp"
#include "metaseg/rng.hpp"

namespace metaseg {

// A homogeneous mini-dataset drawn from one source, split into the
// adaptation (support) and evaluation (query) halves of an episode.
template <typename Real>
struct Episode {
  std::string task_id;
  std::vector<Sample<Real>> support;
  std::vector<Sample<Real>> query;
};

template <typename Real>
using EpisodeBatch = std::vector<Episode<Real>>;

// Probability over source ids; the knob that customizes task sampling.
struct TaskDistribution {
  std::vector<std::pair<std::string, double>> weights;  // fixed order

  static TaskDistribution uniform(const std::vector<std::string>& ids) {
    if (ids.empty()) throw ConfigError("TaskDistribution: no sources");
    TaskDistribution d;
    for (const auto& id : ids) d.weights.push_back({id, 1.0 / static_cast<double>(ids.size())});
    return d;
  }

  void validate() const {
    if (weights.empty()) throw ConfigError("TaskDistribution: empty");
    double total = 0;
    for (const auto& [id, p] : weights) {
      if (p < 0) throw ConfigError("TaskDistribution: negative probability for '" + id + "'");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("TaskDistribution: probabilities sum to " + std::to_string(total));
  }
};

struct SamplerConfig {
  std::int64_t episode_size = 16;
  std::int64_t support_size = 8;
  std::int64_t batch_episodes = 4;
  std::int64_t instance_batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (episode_size <= 0 || batch_episodes <= 0 || instance_batch_size <= 0)
      throw ConfigError("SamplerConfig: sizes must be positive");
    if (support_size <= 0 || support_size >= episode_size)
      throw ConfigError("SamplerConfig: need 0 < support_size < episode_size, got " +
                        std::to_string(support_size) + " vs " + std::to_string(episode_size));
  }
};

// Order-preserving prefix/suffix split of an episode's instances.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_support_query(const std::vector<T>& instances,
                                                              std::int64_t support_size) {
  if (support_size <= 0 || support_size >= static_cast<std::int64_t>(instances.size()))
    throw ConfigError("split_support_query: support size " + std::to_string(support_size) +
                      " must lie in (0, " + std::to_string(instances.size()) + ")");
  std::vector<T> support(instances.begin(), instances.begin() + support_size);
  std::vector<T> query(instances.begin() + support_size, instances.end());
  return {std::move(support), std::move(query)};
}

// Task-level batch stream: draw a source from the distribution, draw
// episode_size instances from its train split (without replacement unless
// the split is smaller than the episode), prefix-split into support/query.
// Infinite and a pure function of (dataset, distribution, config, seed).
template <typename Real>
class EpisodeLoader {
 public:
  EpisodeLoader(const MetaDataset<Real>& meta, TaskDistribution dist, SamplerConfig cfg)
      : meta_(&meta), dist_(std::move(dist)), cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
    dist_.validate();
    for (const auto& [id, p] : dist_.weights) {
      if (!meta.has_source(id)) throw ConfigError("task distribution references unknown source '" + id + "'");
      if (p > 0 && meta.splits.at(id).train.empty())
        throw ConfigError("task distribution gives weight to source '" + id + "' with an empty train split");
    }
  }

  Episode<Real> next_episode() {
    const std::string& task = draw_task();
    const TaskSource<Real>& src = meta_->source(task);
    const auto& train = meta_->splits.at(task).train;
    const std::int64_t n = static_cast<std::int64_t>(train.size());

    std::vector<std::int64_t> picks;
    if (n >= cfg_.episode_size) {
      auto order = rng_.sample_without_replacement(n, cfg_.episode_size);
      for (const auto i : order) picks.push_back(train[static_cast<std::size_t>(i)]);
    } else {
      for (std::int64_t i = 0; i < cfg_.episode_size; ++i)
        picks.push_back(train[static_cast<std::size_t>(rng_.uniform_int(static_cast<std::uint64_t>(n)))]);
    }

    Episode<Real> ep;
    ep.task_id = task;
    auto [support_idx, query_idx] = split_support_query(picks, cfg_.support_size);
    for (const auto i : support_idx) ep.support.push_back(src.samples[static_cast<std::size_t>(i)]);
    for (const auto i : query_idx) ep.query.push_back(src.samples[static_cast<std::size_t>(i)]);
    return ep;
  }

  EpisodeBatch<Real> next() {
    EpisodeBatch<Real> batch;
    for (std::int64_t e = 0; e < cfg_.batch_episodes; ++e) batch.push_back(next_episode());
    return batch;
  }

 private:
  const std::string& draw_task() {
    const double u = rng_.uniform01();
    double cum = 0;
    for (const auto& [id, p] : dist_.weights) {
      cum += p;
      if (u < cum) return id;
    }
    return dist_.weights.back().first;
  }

  const MetaDataset<Real>* meta_;
  TaskDistribution dist_;
  SamplerConfig cfg_;
  Rng rng_;
};

// Instance-level stream: at each epoch start every source is independently
// subsampled to the smallest source's train-split size, the pooled
// instances are shuffled, and batches are emitted in order. The truncation
// subsample is refreshed every epoch.
template <typename Real>
class BatchLoader {
 public:
  BatchLoader(const MetaDataset<Real>& meta, SamplerConfig cfg) : meta_(&meta), cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
    for (const auto& src : meta.sources)
      if (!meta.splits.at(src.id).train.empty()) source_ids_.push_back(src.id);
    if (source_ids_.empty()) throw ConfigError("batch_loader: no source has a non-empty train split");
    min_train_ = std::numeric_limits<std::int64_t>::max();
    for (const auto& id : source_ids_)
      min_train_ = std::min(min_train_, static_cast<std::int64_t>(meta.splits.at(id).train.size()));
    start_epoch();
  }

  // Next batch; rolls into a freshly truncated epoch when exhausted.
  std::vector<Sample<Real>> next() {
    if (cursor_ >= static_cast<std::int64_t>(epoch_order_.size())) start_epoch();
    std::vector<Sample<Real>> batch;
    const std::int64_t end =
        std::min<std::int64_t>(cursor_ + cfg_.instance_batch_size, static_cast<std::int64_t>(epoch_order_.size()));
    for (; cursor_ < end; ++cursor_) {
      const auto& [sid, idx] = epoch_order_[static_cast<std::size_t>(cursor_)];
      batch.push_back(meta_->source(sid).samples[static_cast<std::size_t>(idx)]);
    }
    return batch;
  }

  // Instances per epoch after truncation: one quota for every source.
  std::int64_t epoch_size() const { return min_train_ * static_cast<std::int64_t>(source_ids_.size()); }
  std::int64_t truncation_size() const { return min_train_; }

 private:
  void start_epoch() {
    epoch_order_.clear();
    for (const auto& id : source_ids_) {
      const auto& train = meta_->splits.at(id).train;
      auto keep = rng_.sample_without_replacement(static_cast<std::int64_t>(train.size()), min_train_);
      for (const auto i : keep) epoch_order_.push_back({id, train[static_cast<std::size_t>(i)]});
    }
    rng_.shuffle(epoch_order_);
    cursor_ = 0;
  }

  const MetaDataset<Real>* meta_;
  SamplerConfig cfg_;
  Rng rng_;
  std::vector<std::string> source_ids_;
  std::int64_t min_train_ = 0;
  std::vector<std::pair<std::string, std::int64_t>> epoch_order_;
  std::int64_t cursor_ = 0;
};

}  // namespace metaseg
