#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaseg/augment.hpp"
#include "metaseg/errors.hpp"
#include "metaseg/metatrain.hpp"
#include "metaseg/rng.hpp"
#include "metaseg/sampler.hpp"
#include "metaseg/segnet.hpp"

namespace metaseg {

// Full experiment description. Serializes canonically (sorted keys), so the
// hash of the resolved manifest identifies a run.
struct RunManifest {
  std::string mode;     // maml | transfer | refine | eval
  std::string dataset;  // dataset root directory
  std::string output;   // run output directory
  std::uint64_t seed = 1;

  std::vector<double> split_fractions = {0.8, 0.0, 0.2};
  std::uint64_t split_seed = 1;

  std::vector<std::string> sources;              // training sources; empty = all
  std::map<std::string, double> distribution;    // task distribution; empty = uniform

  SamplerConfig sampler;
  AugmentConfig augment;
  UNetConfig model;
  MamlConfig maml;
  TransferConfig transfer;
  RefineConfig refine;

  std::string refine_checkpoint;
  std::string refine_task;
  std::string eval_checkpoint;
  std::string eval_task;
  std::string eval_split = "test";

  int workers = 1;
  std::int64_t checkpoint_every = 0;

  RunManifest() {
    // Desk-scale default; the paper-faithful 768x768 stays the struct
    // default of AugmentConfig itself.
    augment.crop_h = 64;
    augment.crop_w = 64;
  }

  void validate() const {
    if (mode != "maml" && mode != "transfer" && mode != "refine" && mode != "eval")
      throw ConfigError("manifest: mode must be maml|transfer|refine|eval, got '" + mode + "'");
    if (dataset.empty()) throw ConfigError("manifest: dataset is required");
    if (mode != "eval" && output.empty()) throw ConfigError("manifest: output is required");
    if (mode == "refine" && (refine_checkpoint.empty() || refine_task.empty()))
      throw ConfigError("manifest: refine mode needs refine.checkpoint and refine.task");
    if (mode == "eval" && (eval_checkpoint.empty() || eval_task.empty()))
      throw ConfigError("manifest: eval mode needs eval.checkpoint and eval.task");
    if (workers < 0) throw ConfigError("manifest: workers must be >= 0");
    sampler.validate();
    augment.validate();
    model.validate();
    maml.validate();
    transfer.validate();
    refine.validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mode"] = mode;
    j["dataset"] = dataset;
    j["output"] = output;
    j["seed"] = seed;
    j["split"] = {{"fractions", split_fractions}, {"seed", split_seed}};
    j["sources"] = sources;
    j["distribution"] = distribution;
    j["sampler"] = {{"episode_size", sampler.episode_size},
                    {"support_size", sampler.support_size},
                    {"batch_episodes", sampler.batch_episodes},
                    {"instance_batch_size", sampler.instance_batch_size},
                    {"seed", sampler.seed}};
    j["augment"] = {{"scale", {augment.scale_lo, augment.scale_hi}},
                    {"brightness", augment.brightness},
                    {"contrast", augment.contrast},
                    {"hue", augment.hue},
                    {"saturation", augment.saturation},
                    {"flip_prob", augment.flip_prob},
                    {"rotation_degrees", augment.rotation_degrees},
                    {"crop", {augment.crop_h, augment.crop_w}}};
    j["model"] = {{"depth", model.depth}, {"base_channels", model.base_channels}, {"in_channels", model.in_channels}};
    j["maml"] = {{"inner_lr", maml.inner_lr},
                 {"inner_steps", maml.inner_steps},
                 {"outer_lr", maml.outer_lr},
                 {"max_iters", maml.max_iters},
                 {"order", maml.order}};
    j["transfer"] = {{"lr", transfer.lr}, {"batch_size", transfer.batch_size}, {"max_iters", transfer.max_iters}};
    j["refine"] = {{"lr", refine.lr},
                   {"iters", refine.iters},
                   {"which_params", refine.which_params},
                   {"head_seed", refine.head_seed},
                   {"batch_size", refine.batch_size},
                   {"checkpoint", refine_checkpoint},
                   {"task", refine_task}};
    j["eval"] = {{"checkpoint", eval_checkpoint}, {"task", eval_task}, {"split", eval_split}};
    j["workers"] = workers;
    j["checkpoint_every"] = checkpoint_every;
    return j;
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    m.mode = j.value("mode", "");
    m.dataset = j.value("dataset", "");
    m.output = j.value("output", "");
    m.seed = j.value("seed", std::uint64_t{1});
    if (j.contains("split")) {
      m.split_fractions = j["split"].value("fractions", m.split_fractions);
      m.split_seed = j["split"].value("seed", m.split_seed);
    }
    m.sources = j.value("sources", m.sources);
    if (j.contains("distribution")) m.distribution = j["distribution"].get<std::map<std::string, double>>();
    if (j.contains("sampler")) {
      const auto& s = j["sampler"];
      m.sampler.episode_size = s.value("episode_size", m.sampler.episode_size);
      m.sampler.support_size = s.value("support_size", m.sampler.support_size);
      m.sampler.batch_episodes = s.value("batch_episodes", m.sampler.batch_episodes);
      m.sampler.instance_batch_size = s.value("instance_batch_size", m.sampler.instance_batch_size);
      m.sampler.seed = s.value("seed", m.sampler.seed);
    }
    if (j.contains("augment")) {
      const auto& a = j["augment"];
      if (a.contains("scale")) {
        m.augment.scale_lo = a["scale"].at(0).get<double>();
        m.augment.scale_hi = a["scale"].at(1).get<double>();
      }
      m.augment.brightness = a.value("brightness", m.augment.brightness);
      m.augment.contrast = a.value("contrast", m.augment.contrast);
      m.augment.hue = a.value("hue", m.augment.hue);
      m.augment.saturation = a.value("saturation", m.augment.saturation);
      m.augment.flip_prob = a.value("flip_prob", m.augment.flip_prob);
      m.augment.rotation_degrees = a.value("rotation_degrees", m.augment.rotation_degrees);
      if (a.contains("crop")) {
        m.augment.crop_h = a["crop"].at(0).get<std::int64_t>();
        m.augment.crop_w = a["crop"].at(1).get<std::int64_t>();
      }
    }
    if (j.contains("model")) {
      const auto& u = j["model"];
      m.model.depth = u.value("depth", m.model.depth);
      m.model.base_channels = u.value("base_channels", m.model.base_channels);
      m.model.in_channels = u.value("in_channels", m.model.in_channels);
    }
    if (j.contains("maml")) {
      const auto& mm = j["maml"];
      m.maml.inner_lr = mm.value("inner_lr", m.maml.inner_lr);
      m.maml.inner_steps = mm.value("inner_steps", m.maml.inner_steps);
      m.maml.outer_lr = mm.value("outer_lr", m.maml.outer_lr);
      m.maml.max_iters = mm.value("max_iters", m.maml.max_iters);
      m.maml.order = mm.value("order", m.maml.order);
    }
    if (j.contains("transfer")) {
      const auto& t = j["transfer"];
      m.transfer.lr = t.value("lr", m.transfer.lr);
      m.transfer.batch_size = t.value("batch_size", m.transfer.batch_size);
      m.transfer.max_iters = t.value("max_iters", m.transfer.max_iters);
    }
    if (j.contains("refine")) {
      const auto& r = j["refine"];
      m.refine.lr = r.value("lr", m.refine.lr);
      m.refine.iters = r.value("iters", m.refine.iters);
      m.refine.which_params = r.value("which_params", m.refine.which_params);
      m.refine.head_seed = r.value("head_seed", m.refine.head_seed);
      m.refine.batch_size = r.value("batch_size", m.refine.batch_size);
      m.refine_checkpoint = r.value("checkpoint", m.refine_checkpoint);
      m.refine_task = r.value("task", m.refine_task);
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      m.eval_checkpoint = e.value("checkpoint", m.eval_checkpoint);
      m.eval_task = e.value("task", m.eval_task);
      m.eval_split = e.value("split", m.eval_split);
    }
    m.workers = j.value("workers", m.workers);
    m.checkpoint_every = j.value("checkpoint_every", m.checkpoint_every);

    // Episode geometry lives in the sampler section; the MAML view mirrors it.
    m.maml.batch_episodes = m.sampler.batch_episodes;
    m.maml.episode_size = m.sampler.episode_size;
    m.maml.support_size = m.sampler.support_size;
    return m;
  }

  static RunManifest from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open manifest '" + path.string() + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad manifest JSON in '" + path.string() + "': " + e.what());
    }
    return from_json(j);
  }

  // nlohmann::json orders object keys, so dump() is canonical.
  std::string canonical() const { return to_json().dump(); }

  std::string hash() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(canonical())));
    return buf;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
    out << to_json().dump(2) << "\n";
  }
};

}  // namespace metaseg
