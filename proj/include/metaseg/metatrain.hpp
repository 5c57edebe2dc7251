#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <type_traits>
#include <utility>
#include <string>
#include <vector>

#include "metaseg/augment.hpp"
#include "metaseg/errors.hpp"
#include "metaseg/eval.hpp"
#include "metaseg/graph.hpp"
#include "metaseg/parallel.hpp"
#include "metaseg/sampler.hpp"
#include "metaseg/segnet.hpp"

namespace metaseg {

struct MamlConfig {
  double inner_lr = 0.01;
  std::int64_t inner_steps = 1;
  double outer_lr = 0.0001;
  std::int64_t batch_episodes = 4;
  std::int64_t episode_size = 16;
  std::int64_t support_size = 8;
  std::int64_t max_iters = 500;
  std::string order = "first";  // reserved for a future "second"

  void validate() const {
    if (inner_lr < 0 || outer_lr < 0) throw ConfigError("maml: learning rates must be nonnegative");
    if (inner_steps < 1) throw ConfigError("maml: inner_steps must be >= 1");
    if (max_iters < 0) throw ConfigError("maml: max_iters must be nonnegative");
    if (order != "first") throw ConfigError("maml: only first-order gradients are implemented, got '" + order + "'");
  }
};

struct TransferConfig {
  double lr = 0.0001;
  std::int64_t batch_size = 16;
  std::int64_t max_iters = 500;

  void validate() const {
    if (lr < 0) throw ConfigError("transfer: lr must be nonnegative");
    if (batch_size < 1) throw ConfigError("transfer: batch_size must be >= 1");
  }
};

struct RefineConfig {
  double lr = 0.0001;
  std::int64_t iters = 150;
  std::string which_params = "all";  // or "head"
  std::uint64_t head_seed = 0;       // InitSpec for the fresh head
  std::int64_t batch_size = 8;

  void validate() const {
    if (lr < 0) throw ConfigError("refine: lr must be nonnegative");
    if (iters < 0) throw ConfigError("refine: iters must be nonnegative");
    if (batch_size < 1) throw ConfigError("refine: batch_size must be >= 1");
    if (which_params != "all" && which_params != "head")
      throw ConfigError("refine: which_params must be 'all' or 'head', got '" + which_params + "'");
  }
};

// Bias-corrected Adam with sparse-update semantics: parameters absent from
// a step's GradMap keep both their value and their moments.
template <typename Real>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  ParamTree<Real> m;
  ParamTree<Real> v;
};

template <typename Real>
void adam_step(ParamTree<Real>& params, const GradMap<Real>& grads, AdamState<Real>& state, double lr) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    auto pit = params.find(name);
    if (pit == params.end()) throw LookupError("adam_step: unknown parameter '" + name + "'");
    Tensor<Real>& p = pit->second;
    require_same_shape(p.shape, g.shape, "adam_step");
    Tensor<Real>& m = state.m.try_emplace(name, Tensor<Real>::zeros(p.shape)).first->second;
    Tensor<Real>& v = state.v.try_emplace(name, Tensor<Real>::zeros(p.shape)).first->second;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const double gi = static_cast<double>(g.data[i]);
      const double mi = state.beta1 * static_cast<double>(m.data[i]) + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * static_cast<double>(v.data[i]) + (1.0 - state.beta2) * gi * gi;
      m.data[i] = static_cast<Real>(mi);
      v.data[i] = static_cast<Real>(vi);
      p.data[i] -= static_cast<Real>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + state.eps));
    }
  }
}

template <typename Real>
struct LossResult {
  Real loss = 0;
  GradMap<Real> grads;
};

struct StepMetrics {
  double loss = 0;
};

template <typename Real>
Tensor<Real> stack_images(std::span<const Sample<Real>> samples) {
  if (samples.empty()) throw ContractError("stack_images: empty sample list");
  const auto& first = samples.front().image;
  Tensor<Real> out({static_cast<std::int64_t>(samples.size()), first.dim(0), first.dim(1), first.dim(2)});
  std::size_t offset = 0;
  for (const auto& s : samples) {
    require_same_shape(s.image.shape, first.shape, "stack_images");
    std::copy(s.image.data.begin(), s.image.data.end(), out.data.begin() + offset);
    offset += s.image.data.size();
  }
  return out;
}

template <typename Real>
IntMask stack_masks(std::span<const Sample<Real>> samples) {
  const auto& first = samples.front().mask;
  IntMask out({static_cast<std::int64_t>(samples.size()), first.dim(0), first.dim(1)});
  std::size_t offset = 0;
  for (const auto& s : samples) {
    require_same_shape(s.mask.shape, first.shape, "stack_masks");
    std::copy(s.mask.data.begin(), s.mask.data.end(), out.data.begin() + offset);
    offset += s.mask.data.size();
  }
  return out;
}

using TrainableFn = std::function<bool(const std::string&)>;

// Mean pixelwise cross-entropy of one homogeneous sample set through the
// task's head.
template <typename Real>
Real loss_on(const ParamSet<Real>& params, const std::string& task_id, std::span<const Sample<Real>> samples) {
  for (const auto& s : samples)
    if (s.source_id != task_id)
      throw RoutingError("loss_on: sample from '" + s.source_id + "' in a '" + task_id + "' batch");
  Graph<Real> g;
  auto logits = model_forward<Real>(g, params, task_id, g.constant(stack_images(samples)),
                                    [](const std::string&) { return false; });
  return g.value(g.softmax_ce(logits, stack_masks(samples))).data[0];
}

template <typename Real>
LossResult<Real> loss_and_grads(const ParamSet<Real>& params, const std::string& task_id,
                                std::span<const Sample<Real>> samples, const TrainableFn& trainable = nullptr) {
  Graph<Real> g;
  auto logits = model_forward<Real>(g, params, task_id, g.constant(stack_images(samples)), trainable);
  auto root = g.softmax_ce(logits, stack_masks(samples));
  LossResult<Real> out;
  out.loss = g.value(root).data[0];
  out.grads = g.backward(root);
  return out;
}

// ---------------------------------------------------------------------------
// First-order MAML core, generic over the episode/sample representation so
// the same algebra runs under both the segmentation model and the closed-form
// toy problems that oracle-check it.
//
// LossGradFn: (const ParamTree<Real>&, const std::string& task,
//              std::span<const SampleT>) -> LossResult<Real>
// ---------------------------------------------------------------------------

template <typename EpisodeT>
using SampleTypeOf = typename std::decay_t<decltype(std::declval<EpisodeT>().support)>::value_type;

template <typename Real, typename SampleT, typename LossGradFn>
ParamTree<Real> inner_adapt_tree(const ParamTree<Real>& tree, const std::string& task,
                                 std::span<const SampleT> support, double inner_lr, std::int64_t inner_steps,
                                 LossGradFn&& fn) {
  ParamTree<Real> adapted = tree;
  for (std::int64_t step = 0; step < inner_steps; ++step) {
    LossResult<Real> res = fn(static_cast<const ParamTree<Real>&>(adapted), task, support);
    for (const auto& [name, g] : res.grads) {
      Tensor<Real>& p = adapted.at(name);
      require_same_shape(p.shape, g.shape, "inner_adapt");
      for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] -= static_cast<Real>(inner_lr) * g.data[i];
    }
  }
  return adapted;
}

// One outer step: adapt per episode on its support set, take the query-loss
// gradient at the adapted weights, average over episodes (absent heads
// contribute zero), and apply a single Adam update to the base weights.
// Episode work is independent; results reduce in episode-index order, so the
// outcome does not depend on the worker count.
template <typename Real, typename EpisodeT, typename LossGradFn>
StepMetrics maml_outer_step_core(ParamTree<Real>& tree, AdamState<Real>& adam, const std::vector<EpisodeT>& batch,
                                 const MamlConfig& cfg, LossGradFn&& fn, int workers = 1) {
  cfg.validate();
  if (batch.empty()) throw ConfigError("maml_outer_step: empty episode batch");
  const std::int64_t n = static_cast<std::int64_t>(batch.size());

  std::vector<LossResult<Real>> results(static_cast<std::size_t>(n));
  parallel_for(n, workers, [&](std::int64_t i) {
    const EpisodeT& ep = batch[static_cast<std::size_t>(i)];
    ParamTree<Real> adapted = inner_adapt_tree<Real, SampleTypeOf<EpisodeT>>(
        tree, ep.task_id, std::span<const SampleTypeOf<EpisodeT>>(ep.support), cfg.inner_lr, cfg.inner_steps, fn);
    results[static_cast<std::size_t>(i)] =
        fn(static_cast<const ParamTree<Real>&>(adapted), ep.task_id, std::span<const SampleTypeOf<EpisodeT>>(ep.query));
  });

  GradMap<Real> total;
  double loss_sum = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    loss_sum += static_cast<double>(results[static_cast<std::size_t>(i)].loss);
    for (const auto& [name, g] : results[static_cast<std::size_t>(i)].grads) {
      auto [it, fresh] = total.try_emplace(name, Tensor<Real>::zeros(g.shape));
      for (std::size_t k = 0; k < g.data.size(); ++k) it->second.data[k] += g.data[k];
    }
  }
  const Real inv = Real(1) / static_cast<Real>(n);
  for (auto& [name, g] : total)
    for (auto& v : g.data) v *= inv;

  adam_step(tree, total, adam, cfg.outer_lr);
  return {loss_sum / static_cast<double>(n)};
}

// ---------------------------------------------------------------------------
// Segmentation-model bindings of the generic core.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
ParamSet<Real> with_tensors(const ParamSet<Real>& meta, ParamTree<Real> tree) {
  ParamSet<Real> out;
  out.config = meta.config;
  out.heads = meta.heads;
  out.tensors = std::move(tree);
  return out;
}

template <typename Real>
auto segnet_loss_fn(const ParamSet<Real>& meta) {
  return [&meta](const ParamTree<Real>& tree, const std::string& task,
                 std::span<const Sample<Real>> samples) -> LossResult<Real> {
    return loss_and_grads(with_tensors(meta, tree), task, samples);
  };
}

}  // namespace detail

// Adaptation step(s) on the support set; returns a new ParamSet, the base is
// untouched. Gradients reach the backbone and the episode task's head only.
template <typename Real>
ParamSet<Real> inner_adapt(const ParamSet<Real>& params, const Episode<Real>& episode, const MamlConfig& cfg) {
  cfg.validate();
  if (episode.support.empty()) throw ConfigError("inner_adapt: episode has no support samples");
  auto fn = detail::segnet_loss_fn(params);
  ParamTree<Real> adapted = inner_adapt_tree<Real, Sample<Real>>(
      params.tensors, episode.task_id, std::span<const Sample<Real>>(episode.support), cfg.inner_lr,
      cfg.inner_steps, fn);
  return detail::with_tensors(params, std::move(adapted));
}

template <typename Real>
StepMetrics maml_outer_step(ParamSet<Real>& params, AdamState<Real>& adam, const EpisodeBatch<Real>& batch,
                            const MamlConfig& cfg, int workers = 1) {
  for (const auto& ep : batch)
    if (ep.support.empty() || ep.query.empty())
      throw ConfigError("maml_outer_step: episode for '" + ep.task_id + "' missing support or query samples");
  auto fn = detail::segnet_loss_fn(params);
  return maml_outer_step_core<Real, Episode<Real>>(params.tensors, adam, batch, cfg, fn, workers);
}

// One instance-level supervised step on a mixed batch: per-instance pixel CE
// routed through each instance's own source head, averaged over instances,
// one Adam update. Per-source groups evaluate independently and reduce in
// sorted source order.
template <typename Real>
StepMetrics transfer_train_step(ParamSet<Real>& params, AdamState<Real>& adam,
                                std::span<const Sample<Real>> batch, const TransferConfig& cfg, int workers = 1) {
  cfg.validate();
  if (batch.empty()) throw ConfigError("transfer_train_step: empty batch");
  std::map<std::string, std::vector<Sample<Real>>> groups;
  for (const auto& s : batch) {
    if (!params.has_head(s.source_id))
      throw RoutingError("transfer_train_step: no head for source '" + s.source_id + "'");
    groups[s.source_id].push_back(s);
  }

  struct GroupResult {
    Real loss = 0;
    GradMap<Real> grads;
    Real weight = 0;
  };
  std::vector<std::pair<std::string, const std::vector<Sample<Real>>*>> ordered;
  for (const auto& [id, samples] : groups) ordered.push_back({id, &samples});
  std::vector<GroupResult> results(ordered.size());

  const Real total_count = static_cast<Real>(batch.size());
  parallel_for(static_cast<std::int64_t>(ordered.size()), workers, [&](std::int64_t i) {
    const auto& [task, samples] = ordered[static_cast<std::size_t>(i)];
    Graph<Real> g;
    auto logits = model_forward<Real>(g, params, task, g.constant(stack_images(std::span<const Sample<Real>>(*samples))));
    const Real weight = static_cast<Real>(samples->size()) / total_count;
    auto root = g.scale(g.softmax_ce(logits, stack_masks(std::span<const Sample<Real>>(*samples))), weight);
    GroupResult r;
    r.loss = g.value(root).data[0];
    r.grads = g.backward(root);
    r.weight = weight;
    results[static_cast<std::size_t>(i)] = std::move(r);
  });

  GradMap<Real> total;
  double loss_sum = 0;
  for (const auto& r : results) {
    loss_sum += static_cast<double>(r.loss);
    for (const auto& [name, g] : r.grads) {
      auto [it, fresh] = total.try_emplace(name, Tensor<Real>::zeros(g.shape));
      for (std::size_t k = 0; k < g.data.size(); ++k) it->second.data[k] += g.data[k];
    }
  }
  adam_step(params.tensors, total, adam, cfg.lr);
  return {loss_sum};
}

// ---------------------------------------------------------------------------
// Training loops and the new-task refinement protocol.
// ---------------------------------------------------------------------------

template <typename Real>
struct TrainHooks {
  std::function<void(std::int64_t iter, double loss)> on_metrics;
  std::function<void(std::int64_t iter, const ParamSet<Real>&)> on_checkpoint;
  std::int64_t checkpoint_every = 0;  // 0: only via the caller at exit
};

namespace detail {

// Per-sample augmentation stream derived from (seed, iter, episode, index);
// worker-count invariant by construction.
template <typename Real>
Sample<Real> augment_at(const Sample<Real>& s, const AugmentConfig& aug, std::uint64_t seed, std::uint64_t iter,
                        std::uint64_t episode, std::uint64_t index) {
  Rng rng(mix_seed(seed, iter, episode, index));
  return augment(s, aug, rng);
}

}  // namespace detail

template <typename Real>
ParamSet<Real> train_maml(const MetaDataset<Real>& meta, const TaskDistribution& dist, const SamplerConfig& scfg,
                          const AugmentConfig& aug, const UNetConfig& ucfg, const MamlConfig& mcfg,
                          std::uint64_t seed, int workers = 1, const TrainHooks<Real>& hooks = {}) {
  mcfg.validate();
  std::vector<std::pair<std::string, std::int32_t>> tasks;
  for (const auto& [id, p] : dist.weights) tasks.push_back({id, meta.source(id).num_classes});
  ParamSet<Real> params = build_model<Real>(ucfg, tasks, InitSpec{mix_seed(seed, fnv1a64("init"))});
  AdamState<Real> adam;
  EpisodeLoader<Real> loader(meta, dist, scfg);

  for (std::int64_t iter = 1; iter <= mcfg.max_iters; ++iter) {
    EpisodeBatch<Real> batch = loader.next();
    for (std::size_t e = 0; e < batch.size(); ++e) {
      std::uint64_t index = 0;
      for (auto& s : batch[e].support)
        s = detail::augment_at(s, aug, seed, static_cast<std::uint64_t>(iter), e, index++);
      for (auto& s : batch[e].query)
        s = detail::augment_at(s, aug, seed, static_cast<std::uint64_t>(iter), e, index++);
    }
    const StepMetrics m = maml_outer_step(params, adam, batch, mcfg, workers);
    if (hooks.on_metrics) hooks.on_metrics(iter, m.loss);
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && iter % hooks.checkpoint_every == 0)
      hooks.on_checkpoint(iter, params);
  }
  return params;
}

template <typename Real>
ParamSet<Real> train_transfer(const MetaDataset<Real>& meta, const std::vector<std::string>& source_ids,
                              const SamplerConfig& scfg, const AugmentConfig& aug, const UNetConfig& ucfg,
                              const TransferConfig& tcfg, std::uint64_t seed, int workers = 1,
                              const TrainHooks<Real>& hooks = {}) {
  tcfg.validate();
  std::vector<std::pair<std::string, std::int32_t>> tasks;
  for (const auto& id : source_ids) tasks.push_back({id, meta.source(id).num_classes});
  ParamSet<Real> params = build_model<Real>(ucfg, tasks, InitSpec{mix_seed(seed, fnv1a64("init"))});
  AdamState<Real> adam;

  MetaDataset<Real> view;  // restricted to the selected sources
  for (const auto& id : source_ids) {
    view.sources.push_back(meta.source(id));
    view.splits[id] = meta.splits.at(id);
  }
  SamplerConfig bcfg = scfg;
  bcfg.instance_batch_size = tcfg.batch_size;
  BatchLoader<Real> loader(view, bcfg);

  for (std::int64_t iter = 1; iter <= tcfg.max_iters; ++iter) {
    std::vector<Sample<Real>> batch = loader.next();
    for (std::size_t i = 0; i < batch.size(); ++i)
      batch[i] = detail::augment_at(batch[i], aug, seed, static_cast<std::uint64_t>(iter), 0, i);
    const StepMetrics m = transfer_train_step(params, adam, std::span<const Sample<Real>>(batch), tcfg, workers);
    if (hooks.on_metrics) hooks.on_metrics(iter, m.loss);
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && iter % hooks.checkpoint_every == 0)
      hooks.on_checkpoint(iter, params);
  }
  return params;
}

template <typename Real>
struct RefineResult {
  ParamSet<Real> params;
  double miou = 0;
  std::vector<double> losses;
};

// Table-1 protocol: attach a fresh head for the unseen task, fine-tune on
// its train split, report mIoU on its test split. The identical procedure
// serves MAML checkpoints, transfer checkpoints, and random-init controls.
template <typename Real>
RefineResult<Real> refine_on_new_task(const ParamSet<Real>& pretrained, const TaskSource<Real>& task,
                                      const SplitAssignment& split, const RefineConfig& cfg,
                                      const AugmentConfig& aug, std::uint64_t seed) {
  cfg.validate();
  if (pretrained.has_head(task.id)) throw ConfigError("refine: task '" + task.id + "' already has a head");
  if (split.train.empty()) throw ConfigError("refine: task '" + task.id + "' has an empty train split");
  if (split.test.empty()) throw ConfigError("refine: task '" + task.id + "' has an empty test split");

  RefineResult<Real> out{attach_head(pretrained, task.id, task.num_classes, InitSpec{cfg.head_seed}), 0.0, {}};
  AdamState<Real> adam;
  const std::string head_prefix = ParamSet<Real>::head_prefix(task.id);
  TrainableFn trainable = nullptr;
  if (cfg.which_params == "head")
    trainable = [head_prefix](const std::string& name) { return name.rfind(head_prefix, 0) == 0; };

  Rng draw_rng(mix_seed(seed, fnv1a64("refine-draws")));
  for (std::int64_t iter = 1; iter <= cfg.iters; ++iter) {
    std::vector<Sample<Real>> batch;
    for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
      const auto idx = split.train[static_cast<std::size_t>(draw_rng.uniform_int(split.train.size()))];
      batch.push_back(detail::augment_at(task.samples[static_cast<std::size_t>(idx)], aug, seed,
                                         static_cast<std::uint64_t>(iter), 0, static_cast<std::uint64_t>(b)));
    }
    auto res = loss_and_grads(out.params, task.id, std::span<const Sample<Real>>(batch), trainable);
    adam_step(out.params.tensors, res.grads, adam, cfg.lr);
    out.losses.push_back(static_cast<double>(res.loss));
  }
  out.miou = evaluate_task(out.params, task, split.test);
  return out;
}

}  // namespace metaseg
