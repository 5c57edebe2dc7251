#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "metaseg/checkpoint.hpp"
#include "metaseg/gradcheck.hpp"
#include "metaseg/gradsuite.hpp"
#include "metaseg/segnet.hpp"

using namespace metaseg;

namespace {

template <typename Real>
Tensor<Real> random_images(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<Real> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<Real>(rng.uniform01());
  return t;
}

IntMask random_target(Shape shape, std::int32_t k, std::uint64_t seed) {
  Rng rng(seed);
  IntMask m(std::move(shape));
  for (auto& v : m.data) v = static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(k)));
  return m;
}

std::vector<char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("build_model shapes heads by task class count", "[segnet]") {
  UNetConfig cfg;  // depth 3, base 8
  auto params = build_model<double>(cfg, {{"A", 2}, {"B", 6}}, InitSpec{1});
  CHECK(params.tensors.at("head/A/weight").shape == Shape{2, 8, 1, 1});
  CHECK(params.tensors.at("head/A/bias").shape == Shape{2});
  CHECK(params.tensors.at("head/B/weight").shape == Shape{6, 8, 1, 1});
  CHECK(params.heads.at("B") == 6);
}

TEST_CASE("build_model is deterministic under the init seed", "[segnet]") {
  UNetConfig cfg;
  auto a = build_model<double>(cfg, {{"A", 2}}, InitSpec{42});
  auto b = build_model<double>(cfg, {{"A", 2}}, InitSpec{42});
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (const auto& [name, t] : a.tensors) CHECK(t.data == b.tensors.at(name).data);
  auto c = build_model<double>(cfg, {{"A", 2}}, InitSpec{43});
  CHECK(a.tensors.at("backbone/enc0/conv0/weight").data != c.tensors.at("backbone/enc0/conv0/weight").data);
}

TEST_CASE("build_model rejects duplicate task ids", "[segnet]") {
  UNetConfig cfg;
  CHECK_THROWS_AS(build_model<double>(cfg, {{"A", 2}, {"A", 3}}, InitSpec{1}), ConfigError);
  CHECK_THROWS_AS(build_model<double>(cfg, {{"a/b", 2}}, InitSpec{1}), ConfigError);
}

TEST_CASE("parameter count matches a layer-by-layer enumeration", "[segnet]") {
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  cfg.in_channels = 3;
  auto params = build_model<double>(cfg, {{"A", 2}}, InitSpec{7});

  // Independent enumeration: (cin, cout, k) per conv layer.
  struct Layer {
    std::int64_t cin, cout, k;
  };
  std::vector<Layer> layers = {
      {3, 4, 3}, {4, 4, 3},    // enc0
      {4, 8, 3}, {8, 8, 3},    // enc1 (bottleneck)
      {12, 4, 3}, {4, 4, 3},   // dec0: upsampled 8 + skip 4 channels in
      {4, 2, 1},               // head
  };
  std::int64_t expect = 0;
  for (const auto& l : layers) expect += l.cout * l.cin * l.k * l.k + l.cout;
  CHECK(params.parameter_count() == expect);
  CHECK(expect == 1734);
}

TEST_CASE("model_forward preserves spatial dims and routes by task", "[segnet]") {
  UNetConfig cfg;  // depth 3
  auto params = build_model<double>(cfg, {{"A", 4}, {"B", 2}}, InitSpec{3});
  auto images = random_images<double>({2, 3, 64, 64}, 9);
  Graph<double> g;
  auto logits = model_forward(g, params, "A", g.constant(images));
  CHECK(g.value(logits).shape == Shape{2, 4, 64, 64});

  Graph<double> g2;
  CHECK_THROWS_AS(model_forward(g2, params, "C", g2.constant(images)), RoutingError);
  Graph<double> g3;
  CHECK_THROWS_AS(model_forward(g3, params, "A", g3.constant(random_images<double>({1, 3, 60, 64}, 1))), ShapeError);
}

TEST_CASE("backward touches only the backbone and the routed head", "[segnet]") {
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  auto params = build_model<double>(cfg, {{"A", 3}, {"B", 2}}, InitSpec{5});
  auto images = random_images<double>({1, 3, 8, 8}, 11);
  Graph<double> g;
  auto logits = model_forward(g, params, "A", g.constant(images));
  auto grads = g.backward(g.softmax_ce(logits, random_target({1, 8, 8}, 3, 13)));
  bool saw_backbone = false, saw_head_a = false;
  for (const auto& [name, grad] : grads) {
    REQUIRE(name.rfind("head/B/", 0) != 0);
    saw_backbone |= ParamSet<double>::is_backbone_key(name);
    saw_head_a |= ParamSet<double>::is_head_key(name, "A");
  }
  CHECK(saw_backbone);
  CHECK(saw_head_a);
  CHECK(grads.size() == params.tensors.size() - 2);  // everything except head B
}

TEST_CASE("forward is pure and deep copies are interchangeable", "[segnet]") {
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  auto params = build_model<double>(cfg, {{"A", 2}}, InitSpec{17});
  const auto snapshot = params.tensors;
  auto images = random_images<double>({1, 3, 16, 16}, 19);

  auto out1 = forward_logits(params, "A", images);
  auto out2 = forward_logits(params, "A", images);
  CHECK(out1.data == out2.data);
  for (const auto& [name, t] : params.tensors) CHECK(t.data == snapshot.at(name).data);

  ParamSet<double> copy = params;
  copy.tensors.at("head/A/bias").data[0] += 0.0;  // storage-independent copy
  auto out3 = forward_logits(copy, "A", images);
  CHECK(out3.data == out1.data);
  copy.tensors.at("head/A/bias").data[0] = 99.0;
  CHECK(params.tensors.at("head/A/bias").data[0] != 99.0);
}

TEST_CASE("attach_head adds a task without disturbing the others", "[segnet]") {
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  auto params = build_model<double>(cfg, {{"A", 2}, {"B", 3}}, InitSpec{23});
  auto images = random_images<double>({1, 3, 8, 8}, 29);
  auto before = forward_logits(params, "A", images);

  auto grown = attach_head(params, "C", 5, InitSpec{31});
  CHECK(grown.heads.size() == 3);
  CHECK(grown.tensors.at("head/C/weight").shape == Shape{5, 4, 1, 1});
  for (const auto& [name, t] : params.tensors)
    if (ParamSet<double>::is_backbone_key(name)) CHECK(t.data == grown.tensors.at(name).data);

  auto after = forward_logits(grown, "A", images);
  CHECK(after.data == before.data);
  CHECK_THROWS_AS(attach_head(params, "A", 4, InitSpec{1}), ConfigError);
}

TEST_CASE("output spatial dims equal input for depths 1-3", "[segnet]") {
  for (std::int64_t depth = 1; depth <= 3; ++depth) {
    UNetConfig cfg;
    cfg.depth = depth;
    cfg.base_channels = 4;
    auto params = build_model<double>(cfg, {{"T", 2}}, InitSpec{static_cast<std::uint64_t>(depth)});
    for (std::int64_t size = 8; size <= 64; size *= 2) {
      auto logits = forward_logits(params, "T", random_images<double>({1, 3, size, size}, 7));
      REQUIRE(logits.shape == Shape{1, 2, size, size});
    }
  }
}

TEST_CASE("full mini U-Net passes the finite-difference sweep", "[segnet]") {
  for (std::uint64_t seed : {41ull, 42ull}) {
    const auto r = check_unet_once(seed);
    INFO(r.name);
    CHECK(r.max_err < 1e-5);
  }
}

TEST_CASE("checkpoints round-trip byte-exactly and preserve the forward", "[segnet]") {
  const auto dir = std::filesystem::temp_directory_path() / "metaseg_test_ckpt";
  std::filesystem::create_directories(dir);
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  auto params = build_model<double>(cfg, {{"A", 2}, {"B", 5}}, InitSpec{53});
  auto images = random_images<double>({1, 3, 16, 16}, 59);
  auto before = forward_logits(params, "B", images);

  save_checkpoint(params, dir / "a.ckpt");
  auto loaded = load_checkpoint<double>(dir / "a.ckpt");
  save_checkpoint(loaded, dir / "b.ckpt");
  CHECK(file_bytes(dir / "a.ckpt") == file_bytes(dir / "b.ckpt"));

  CHECK(loaded.config.depth == 2);
  CHECK(loaded.heads.at("B") == 5);
  auto after = forward_logits(loaded, "B", images);
  CHECK(after.data == before.data);

  CHECK_THROWS_AS(load_checkpoint<float>(dir / "a.ckpt"), ConfigError);  // precision mismatch
}
