#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "metaseg/errors.hpp"
#include "metaseg/graph.hpp"
#include "metaseg/rng.hpp"
#include "metaseg/tensor.hpp"

namespace metaseg {

struct UNetConfig {
  std::int64_t depth = 3;
  std::int64_t base_channels = 8;
  std::int64_t in_channels = 3;

  void validate() const {
    if (depth < 1) throw ConfigError("UNetConfig: depth must be >= 1");
    if (base_channels < 1 || in_channels < 1) throw ConfigError("UNetConfig: channels must be >= 1");
  }

  std::int64_t spatial_multiple() const { return std::int64_t{1} << depth; }
  std::int64_t level_channels(std::int64_t level) const { return base_channels << level; }
  // The decoder ends at base_channels; heads consume that.
  std::int64_t feature_channels() const { return base_channels; }
};

// Fan-in-scaled uniform init for conv weights, zero biases. Each tensor's
// stream is derived from (seed, tensor name), so values do not depend on
// creation order.
struct InitSpec {
  std::uint64_t seed = 0;
};

// Shared backbone parameters plus one head per task. Value semantics: a
// copy is a storage-independent duplicate, which is exactly what adapted
// weight copies need.
template <typename Real>
struct ParamSet {
  UNetConfig config;
  std::map<std::string, std::int32_t> heads;  // task_id -> class count
  ParamTree<Real> tensors;

  bool has_head(const std::string& task_id) const { return heads.count(task_id) > 0; }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : tensors) n += t.numel();
    return n;
  }

  static bool is_backbone_key(const std::string& key) { return key.rfind("backbone/", 0) == 0; }
  static std::string head_prefix(const std::string& task_id) { return "head/" + task_id + "/"; }
  static bool is_head_key(const std::string& key, const std::string& task_id) {
    return key.rfind(head_prefix(task_id), 0) == 0;
  }
};

namespace detail {

template <typename Real>
Tensor<Real> he_uniform(const Shape& shape, std::int64_t fan_in, std::uint64_t seed) {
  Tensor<Real> t(shape);
  Rng rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data) v = static_cast<Real>(rng.uniform(-bound, bound));
  return t;
}

template <typename Real>
void add_conv(ParamTree<Real>& tree, const std::string& prefix, std::int64_t cin, std::int64_t cout,
              std::int64_t ksize, const InitSpec& init) {
  const std::string wname = prefix + "/weight";
  tree.emplace(wname, he_uniform<Real>({cout, cin, ksize, ksize}, cin * ksize * ksize,
                                       mix_seed(init.seed, fnv1a64(wname))));
  tree.emplace(prefix + "/bias", Tensor<Real>({cout}));
}

template <typename Real>
void add_head(ParamSet<Real>& params, const std::string& task_id, std::int32_t num_classes, const InitSpec& init) {
  if (task_id.empty() || task_id.find('/') != std::string::npos)
    throw ConfigError("task id '" + task_id + "' must be non-empty and free of '/'");
  if (num_classes < 2) throw ConfigError("head for '" + task_id + "' needs at least 2 classes");
  if (params.has_head(task_id)) throw ConfigError("duplicate task id '" + task_id + "'");
  add_conv(params.tensors, "head/" + task_id, params.config.feature_channels(), num_classes, 1, init);
  params.heads[task_id] = num_classes;
}

}  // namespace detail

// Encoder of `depth` levels (two 3x3 conv+relu each, maxpool2 between),
// mirrored nearest-upsample decoder with skip concatenation, and one 1x1
// conv head per task.
template <typename Real>
ParamSet<Real> build_model(const UNetConfig& cfg, const std::vector<std::pair<std::string, std::int32_t>>& tasks,
                           const InitSpec& init) {
  cfg.validate();
  ParamSet<Real> params;
  params.config = cfg;
  for (std::int64_t i = 0; i < cfg.depth; ++i) {
    const std::int64_t cin = i == 0 ? cfg.in_channels : cfg.level_channels(i - 1);
    const std::int64_t cout = cfg.level_channels(i);
    detail::add_conv(params.tensors, "backbone/enc" + std::to_string(i) + "/conv0", cin, cout, 3, init);
    detail::add_conv(params.tensors, "backbone/enc" + std::to_string(i) + "/conv1", cout, cout, 3, init);
  }
  for (std::int64_t i = cfg.depth - 2; i >= 0; --i) {
    const std::int64_t cout = cfg.level_channels(i);
    const std::int64_t cin = cfg.level_channels(i + 1) + cout;  // upsampled + skip
    detail::add_conv(params.tensors, "backbone/dec" + std::to_string(i) + "/conv0", cin, cout, 3, init);
    detail::add_conv(params.tensors, "backbone/dec" + std::to_string(i) + "/conv1", cout, cout, 3, init);
  }
  for (const auto& [task_id, k] : tasks) detail::add_head(params, task_id, k, init);
  return params;
}

// New ParamSet sharing backbone values plus a freshly initialized head.
template <typename Real>
ParamSet<Real> attach_head(const ParamSet<Real>& params, const std::string& task_id, std::int32_t num_classes,
                           const InitSpec& init) {
  ParamSet<Real> out = params;
  detail::add_head(out, task_id, num_classes, init);
  return out;
}

// Builds the functional forward pass on a graph. Parameters for which
// `trainable` returns true are registered as graph parameters (and thus
// reachable by backward); everything else enters as constants. Only the
// selected task's head participates at all.
template <typename Real>
typename Graph<Real>::NodeId model_forward(Graph<Real>& g, const ParamSet<Real>& params, const std::string& task_id,
                                           typename Graph<Real>::NodeId images,
                                           const std::function<bool(const std::string&)>& trainable = nullptr) {
  params.config.validate();
  if (!params.has_head(task_id)) throw RoutingError("no head for task '" + task_id + "'");
  const Tensor<Real>& in = g.value(images);
  if (in.ndim() != 4) throw ShapeError("model_forward: images must be 4-D, got " + shape_str(in.shape));
  if (in.dim(1) != params.config.in_channels)
    throw ShapeError("model_forward: expected " + std::to_string(params.config.in_channels) + " channels, got " +
                     std::to_string(in.dim(1)));
  const std::int64_t mult = params.config.spatial_multiple();
  if (in.dim(2) % mult != 0 || in.dim(3) % mult != 0)
    throw ShapeError("model_forward: spatial dims " + std::to_string(in.dim(2)) + "x" + std::to_string(in.dim(3)) +
                     " must be divisible by " + std::to_string(mult));

  auto node_of = [&](const std::string& name) {
    const auto it = params.tensors.find(name);
    if (it == params.tensors.end()) throw LookupError("missing parameter '" + name + "'");
    return (trainable && !trainable(name)) ? g.constant(it->second) : g.param(name, it->second);
  };
  auto conv_block = [&](typename Graph<Real>::NodeId x, const std::string& prefix) {
    x = g.relu(g.conv2d(x, node_of(prefix + "/conv0/weight"), node_of(prefix + "/conv0/bias")));
    return g.relu(g.conv2d(x, node_of(prefix + "/conv1/weight"), node_of(prefix + "/conv1/bias")));
  };

  std::vector<typename Graph<Real>::NodeId> skips;
  auto x = images;
  for (std::int64_t i = 0; i < params.config.depth; ++i) {
    x = conv_block(x, "backbone/enc" + std::to_string(i));
    if (i < params.config.depth - 1) {
      skips.push_back(x);
      x = g.maxpool2(x);
    }
  }
  for (std::int64_t i = params.config.depth - 2; i >= 0; --i) {
    x = g.concat_channels(g.upsample2(x), skips[static_cast<std::size_t>(i)]);
    x = conv_block(x, "backbone/dec" + std::to_string(i));
  }
  const std::string head = "head/" + task_id;
  return g.conv2d(x, node_of(head + "/weight"), node_of(head + "/bias"));
}

// Value-level forward: no gradient bookkeeping, params untouched.
template <typename Real>
Tensor<Real> forward_logits(const ParamSet<Real>& params, const std::string& task_id, const Tensor<Real>& images) {
  Graph<Real> g;
  auto logits = model_forward<Real>(g, params, task_id, g.constant(images),
                                    [](const std::string&) { return false; });
  return g.value(logits);
}

}  // namespace metaseg
