#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "metaseg/runner.hpp"

using namespace metaseg;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("metaseg_runner_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string file_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunManifest tiny_maml_manifest(const fs::path& dataset, const fs::path& out) {
  RunManifest m;
  m.mode = "maml";
  m.dataset = dataset.string();
  m.output = out.string();
  m.seed = 7;
  m.split_fractions = {0.8, 0.0, 0.2};
  m.split_seed = 3;
  m.sampler.episode_size = 4;
  m.sampler.support_size = 2;
  m.sampler.batch_episodes = 2;
  m.sampler.seed = 9;
  m.augment.crop_h = 16;
  m.augment.crop_w = 16;
  m.model.depth = 2;
  m.model.base_channels = 4;
  m.maml.max_iters = 4;
  m.maml.batch_episodes = 2;
  m.maml.episode_size = 4;
  m.maml.support_size = 2;
  return m;
}

}  // namespace

TEST_CASE("run_synth writes ingestible sources with the requested class spread", "[runner]") {
  auto dir = temp_dir("synth");
  auto ids = run_synth<float>(5, {{2, 20}, {3, 20}, {4, 20}, {6, 20}}, 16, dir);
  REQUIRE(ids == std::vector<std::string>{"s0_k2", "s1_k3", "s2_k4", "s3_k6"});
  auto meta = load_meta_dataset<float>(dir, {0.8, 0.0, 0.2}, 1);
  REQUIRE(meta.sources.size() == 4);
  CHECK(meta.source("s3_k6").num_classes == 6);
  CHECK(meta.source("s0_k2").samples.size() == 20);

  // Byte-identical regeneration.
  auto dir2 = temp_dir("synth2");
  run_synth<float>(5, {{2, 20}, {3, 20}, {4, 20}, {6, 20}}, 16, dir2);
  CHECK(file_text(dir / "s1_k3" / "images" / "0003.png") == file_text(dir2 / "s1_k3" / "images" / "0003.png"));
  CHECK(file_text(dir / "s1_k3" / "manifest.json") == file_text(dir2 / "s1_k3" / "manifest.json"));
}

TEST_CASE("manifest serialization is canonical and hashable", "[runner]") {
  RunManifest m = tiny_maml_manifest("data", "out");
  const std::string c1 = m.canonical();
  const std::string h1 = m.hash();
  RunManifest copy = RunManifest::from_json(m.to_json());
  CHECK(copy.canonical() == c1);
  CHECK(copy.hash() == h1);
  copy.seed = 99;
  CHECK(copy.hash() != h1);
  CHECK(h1.size() == 16);

  RunManifest bad = m;
  bad.mode = "nonsense";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("training runs write metrics, checkpoint, and a resolved manifest", "[runner]") {
  auto data = temp_dir("traindata");
  run_synth<float>(11, {{2, 10}, {3, 10}}, 16, data);
  auto out = temp_dir("trainout");
  auto m = tiny_maml_manifest(data, out);
  std::ostringstream log;
  auto outcome = run_manifest<float>(m, log);

  CHECK(fs::exists(out / "checkpoint.ckpt"));
  CHECK(fs::exists(out / "manifest.json"));
  const std::string metrics = file_text(out / "metrics.tsv");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 5);  // header + 4 iters
  CHECK(metrics.rfind("iter\tloss\n", 0) == 0);

  auto loaded = load_checkpoint<float>(out / "checkpoint.ckpt");
  CHECK(loaded.heads.size() == 2);
  CHECK(loaded.parameter_count() == outcome.params.parameter_count());
}

TEST_CASE("zero learning rates leave the checkpoint at initialization", "[runner]") {
  auto data = temp_dir("lr0data");
  run_synth<float>(13, {{2, 8}, {3, 8}}, 16, data);
  auto out = temp_dir("lr0out");
  auto m = tiny_maml_manifest(data, out);
  m.maml.inner_lr = 0.0;
  m.maml.outer_lr = 0.0;
  std::ostringstream log;
  run_manifest<float>(m, log);

  auto meta = load_meta_dataset<float>(data, m.split_fractions, m.split_seed);
  std::vector<std::pair<std::string, std::int32_t>> tasks;
  for (const auto& s : meta.sources) tasks.push_back({s.id, s.num_classes});
  auto expected = build_model<float>(m.model, tasks, InitSpec{mix_seed(m.seed, fnv1a64("init"))});

  auto loaded = load_checkpoint<float>(out / "checkpoint.ckpt");
  REQUIRE(loaded.tensors.size() == expected.tensors.size());
  for (const auto& [name, t] : expected.tensors) CHECK(loaded.tensors.at(name).data == t.data);
}

TEST_CASE("identical manifests replay to byte-identical metrics", "[runner]") {
  auto data = temp_dir("replaydata");
  run_synth<float>(17, {{2, 10}, {4, 10}}, 16, data);
  auto out1 = temp_dir("replay1");
  auto out2 = temp_dir("replay2");
  auto m1 = tiny_maml_manifest(data, out1);
  auto m2 = tiny_maml_manifest(data, out2);
  std::ostringstream log;
  run_manifest<float>(m1, log);
  run_manifest<float>(m2, log);
  CHECK(file_text(out1 / "metrics.tsv") == file_text(out2 / "metrics.tsv"));
  CHECK(file_text(out1 / "checkpoint.ckpt") == file_text(out2 / "checkpoint.ckpt"));
}

TEST_CASE("refine manifests produce a result and an evaluable checkpoint", "[runner]") {
  auto data = temp_dir("refdata");
  run_synth<float>(19, {{2, 10}, {3, 10}, {4, 10}}, 16, data);
  auto pre_out = temp_dir("refpre");
  auto m = tiny_maml_manifest(data, pre_out);
  m.sources = {"s0_k2", "s1_k3"};
  std::ostringstream log;
  run_manifest<float>(m, log);

  auto ref_out = temp_dir("refout");
  RunManifest r = m;
  r.mode = "refine";
  r.output = ref_out.string();
  r.sources.clear();
  r.refine_checkpoint = (pre_out / "checkpoint.ckpt").string();
  r.refine_task = "s2_k4";
  r.refine.iters = 3;
  r.refine.batch_size = 2;
  auto outcome = run_manifest<float>(r, log);
  CHECK(outcome.miou >= 0.0);
  CHECK(outcome.miou <= 1.0);
  CHECK(fs::exists(ref_out / "result.json"));

  const double again = run_eval<float>(ref_out / "checkpoint.ckpt", data, "s2_k4", "test", r.split_fractions,
                                       r.split_seed);
  CHECK(again == outcome.miou);
}

TEST_CASE("overlay strips are 3x wide and decode to the evaluation argmax", "[runner]") {
  auto data = temp_dir("ovdata");
  run_synth<float>(23, {{3, 6}}, 16, data);
  auto meta = load_meta_dataset<float>(data, {0.8, 0.0, 0.2}, 1);
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  auto params = build_model<float>(cfg, {{"s0_k3", 3}}, InitSpec{29});
  const auto ckpt = temp_dir("ovckpt") / "m.ckpt";
  save_checkpoint(params, ckpt);

  const auto out_png = temp_dir("ovout") / "strip.png";
  run_overlay<float>(ckpt, data, "s0_k3", 2, out_png, {0.8, 0.0, 0.2}, 1);
  auto strip = read_png(out_png);
  REQUIRE(strip.width == 48);  // 3 x 16
  REQUIRE(strip.height == 16);

  // Decode the prediction panel back to class ids via the fixed palette and
  // compare with the same argmax evaluation uses.
  const auto& sample = meta.source("s0_k3").samples[2];
  Tensor<float> batch({1, 3, 16, 16});
  batch.data = sample.image.data;
  const IntMask expect = argmax_mask(forward_logits(params, "s0_k3", batch));
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const auto decoded = class_of_color(strip.at(y, 32 + x, 0), strip.at(y, 32 + x, 1), strip.at(y, 32 + x, 2), 3);
      REQUIRE(decoded.has_value());
      REQUIRE(*decoded == expect.data[static_cast<std::size_t>(y * 16 + x)]);
    }

  // Truth panel decodes to the mask as well.
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const auto decoded = class_of_color(strip.at(y, 16 + x, 0), strip.at(y, 16 + x, 1), strip.at(y, 16 + x, 2), 3);
      REQUIRE(decoded.has_value());
      REQUIRE(*decoded == sample.mask.data[static_cast<std::size_t>(y * 16 + x)]);
    }

  CHECK_THROWS_AS(run_overlay<float>(ckpt, data, "s0_k3", 99, out_png, {0.8, 0.0, 0.2}, 1), ConfigError);
}

TEST_CASE("matrix cell manifests derive deterministically from the base", "[runner]") {
  RunManifest base = tiny_maml_manifest("data", "unused");
  MatrixJob job{"s2_k4", "all", "maml"};
  auto [pre1, ref1] = matrix_cell_manifests(base, "data", "cell", {"s0_k2", "s1_k3", "s2_k4"}, job);
  auto [pre2, ref2] = matrix_cell_manifests(base, "data", "cell", {"s0_k2", "s1_k3", "s2_k4"}, job);
  CHECK(pre1.canonical() == pre2.canonical());
  CHECK(ref1.canonical() == ref2.canonical());
  CHECK(pre1.sources == std::vector<std::string>{"s0_k2", "s1_k3"});
  CHECK(ref1.refine_task == "s2_k4");
  CHECK(ref1.refine_checkpoint == (fs::path("cell") / "pretrain" / "checkpoint.ckpt").string());

  MatrixJob other{"s2_k4", "s0_k2", "maml"};
  auto [pre3, ref3] = matrix_cell_manifests(base, "data", "cell", {"s0_k2", "s1_k3", "s2_k4"}, other);
  CHECK(pre3.sources == std::vector<std::string>{"s0_k2"});
  CHECK(pre3.seed != pre1.seed);
}

TEST_CASE("manifest validation failures are config errors", "[runner]") {
  RunManifest m = tiny_maml_manifest("data", "out");
  m.mode = "refine";  // missing checkpoint/task
  std::ostringstream log;
  CHECK_THROWS_AS(run_manifest<float>(m, log), ConfigError);

  RunManifest bad = tiny_maml_manifest("data", "out");
  bad.sampler.support_size = 4;  // == episode_size
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
