#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>

#include "metaseg/eval.hpp"

using namespace metaseg;

namespace {

IntMask mask_of(Shape shape, std::vector<std::int32_t> vals) { return IntMask(std::move(shape), std::move(vals)); }

// Brute-force per-pixel set arithmetic: independent of the accumulator.
double set_oracle_miou(const std::vector<std::pair<IntMask, IntMask>>& pairs, std::int32_t k) {
  std::map<std::int32_t, std::int64_t> inter, uni;
  for (const auto& [pred, truth] : pairs) {
    for (std::int32_t c = 0; c < k; ++c) {
      for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const bool in_p = pred.data[static_cast<std::size_t>(i)] == c;
        const bool in_t = truth.data[static_cast<std::size_t>(i)] == c;
        if (in_p && in_t) inter[c]++;
        if (in_p || in_t) uni[c]++;
      }
    }
  }
  double total = 0;
  int present = 0;
  for (std::int32_t c = 0; c < k; ++c) {
    if (uni[c] == 0) continue;
    total += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    ++present;
  }
  return total / present;
}

IntMask random_mask(Shape shape, std::int32_t k, Rng& rng) {
  IntMask m(std::move(shape));
  for (auto& v : m.data) v = static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(k)));
  return m;
}

}  // namespace

TEST_CASE("perfect prediction scores 1", "[eval]") {
  Rng rng(3);
  auto truth = random_mask({6, 6}, 3, rng);
  ConfusionAccumulator acc(3);
  accumulate(acc, truth, truth);
  CHECK(miou(acc) == 1.0);
  for (std::int32_t k = 0; k < 3; ++k) {
    if (acc.union_[static_cast<std::size_t>(k)] == 0) continue;
    CHECK(acc.intersection[static_cast<std::size_t>(k)] == acc.union_[static_cast<std::size_t>(k)]);
  }
}

TEST_CASE("disjoint single-class masks give zero intersections", "[eval]") {
  ConfusionAccumulator acc(2);
  accumulate(acc, mask_of({2, 2}, {0, 0, 0, 0}), mask_of({2, 2}, {1, 1, 1, 1}));
  CHECK(acc.intersection[0] == 0);
  CHECK(acc.intersection[1] == 0);
  CHECK(acc.union_[0] == 4);
  CHECK(acc.union_[1] == 4);
  CHECK(miou(acc) == 0.0);
}

TEST_CASE("the worked 2x2 case scores 7/12", "[eval]") {
  ConfusionAccumulator acc(2);
  accumulate(acc, mask_of({2, 2}, {0, 1, 1, 1}), mask_of({2, 2}, {0, 0, 1, 1}));
  CHECK(std::abs(miou(acc) - 7.0 / 12.0) < 1e-15);
}

TEST_CASE("accumulator matches the per-pixel set oracle", "[eval]") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::int32_t k = 2 + static_cast<std::int32_t>(rng.uniform_int(5));
    const std::int64_t h = 1 + static_cast<std::int64_t>(rng.uniform_int(16));
    const std::int64_t w = 1 + static_cast<std::int64_t>(rng.uniform_int(16));
    auto pred = random_mask({h, w}, k, rng);
    auto truth = random_mask({h, w}, k, rng);
    ConfusionAccumulator acc(k);
    accumulate(acc, pred, truth);
    REQUIRE(std::abs(miou(acc) - set_oracle_miou({{pred, truth}}, k)) <= 1e-12);
  }
}

TEST_CASE("aggregation scores the dataset, not the image average", "[eval]") {
  // Two images chosen so aggregate-then-score differs from score-then-average.
  auto p1 = mask_of({1, 2}, {0, 1});
  auto t1 = mask_of({1, 2}, {0, 0});
  auto p2 = mask_of({1, 2}, {0, 0});
  auto t2 = mask_of({1, 2}, {0, 0});

  ConfusionAccumulator acc(2);
  accumulate(acc, p1, t1);
  accumulate(acc, p2, t2);
  const double aggregated = miou(acc);
  CHECK(std::abs(aggregated - set_oracle_miou({{p1, t1}, {p2, t2}}, 2)) <= 1e-12);

  ConfusionAccumulator a1(2), a2(2);
  accumulate(a1, p1, t1);
  accumulate(a2, p2, t2);
  const double image_mean = (miou(a1) + miou(a2)) / 2.0;
  CHECK(aggregated != image_mean);
}

TEST_CASE("accumulators merge shard-independently", "[eval]") {
  Rng rng(19);
  auto p1 = random_mask({5, 5}, 3, rng), t1 = random_mask({5, 5}, 3, rng);
  auto p2 = random_mask({5, 5}, 3, rng), t2 = random_mask({5, 5}, 3, rng);
  ConfusionAccumulator whole(3);
  accumulate(whole, p1, t1);
  accumulate(whole, p2, t2);
  ConfusionAccumulator s1(3), s2(3);
  accumulate(s1, p1, t1);
  accumulate(s2, p2, t2);
  s2.merge(s1);
  CHECK(s2.intersection == whole.intersection);
  CHECK(s2.union_ == whole.union_);
}

TEST_CASE("miou is invariant under consistent label permutation", "[eval]") {
  Rng rng(23);
  auto pred = random_mask({8, 8}, 3, rng);
  auto truth = random_mask({8, 8}, 3, rng);
  ConfusionAccumulator acc(3);
  accumulate(acc, pred, truth);

  const std::int32_t perm[3] = {2, 0, 1};
  auto apply = [&](const IntMask& m) {
    IntMask out = m;
    for (auto& v : out.data) v = perm[v];
    return out;
  };
  ConfusionAccumulator acc2(3);
  accumulate(acc2, apply(pred), apply(truth));
  CHECK(std::abs(miou(acc) - miou(acc2)) <= 1e-15);
}

TEST_CASE("miou stays within [0,1] and rejects empty evaluation", "[eval]") {
  Rng rng(29);
  for (int trial = 0; trial < 50; ++trial) {
    ConfusionAccumulator acc(4);
    accumulate(acc, random_mask({4, 4}, 4, rng), random_mask({4, 4}, 4, rng));
    const double v = miou(acc);
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
  ConfusionAccumulator empty(3);
  CHECK_THROWS_AS(miou(empty), EmptyEvalError);
  ConfusionAccumulator acc(2);
  CHECK_THROWS_AS(accumulate(acc, mask_of({1, 1}, {3}), mask_of({1, 1}, {0})), LabelRangeError);
  CHECK_THROWS_AS(accumulate(acc, mask_of({1, 2}, {0, 0}), mask_of({1, 1}, {0})), ShapeError);
}

TEST_CASE("argmax_mask breaks ties toward the lower class id", "[eval]") {
  Tensor<double> logits({1, 3, 1, 2}, {0.5, 0.1, 0.5, 0.9, 0.2, 0.1});
  auto m = argmax_mask(logits);
  CHECK(m.data == std::vector<std::int32_t>{0, 1});
}

TEST_CASE("a constant-class predictor on a balanced task scores about 0.25", "[eval]") {
  // Head weights/biases forced so logits always favor class 0.
  auto src = generate_synthetic_source<double>(31, 2, 12, 16, 16, "bal");
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  auto params = build_model<double>(cfg, {{"bal", 2}}, InitSpec{1});
  for (auto& [name, t] : params.tensors)
    if (name.rfind("head/bal/", 0) == 0) std::fill(t.data.begin(), t.data.end(), 0.0);
  params.tensors.at("head/bal/bias").data[0] = 10.0;

  std::vector<std::int64_t> split;
  for (std::int64_t i = 0; i < 12; ++i) split.push_back(i);
  const double v = evaluate_task(params, src, split);

  // Oracle: fraction of class-0 truth pixels determines both class IoUs.
  std::int64_t zeros = 0, total = 0;
  for (const auto& s : src.samples) {
    for (const auto m : s.mask.data) zeros += m == 0 ? 1 : 0;
    total += s.mask.numel();
  }
  const double frac0 = static_cast<double>(zeros) / static_cast<double>(total);
  CHECK(std::abs(v - frac0 / 2.0) < 1e-12);
  CHECK(v > 0.15);
  CHECK(v < 0.35);
}

TEST_CASE("evaluation is deterministic and random models score near chance", "[eval]") {
  auto src = generate_synthetic_source<double>(37, 2, 10, 16, 16, "chance");
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  auto params = build_model<double>(cfg, {{"chance", 2}}, InitSpec{5});
  std::vector<std::int64_t> split = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const double a = evaluate_task(params, src, split);
  const double b = evaluate_task(params, src, split);
  CHECK(a == b);
  CHECK(a > 0.15);
  CHECK(a < 0.4);
}

TEST_CASE("center crop trims to the divisibility requirement", "[eval]") {
  auto src = generate_synthetic_source<double>(43, 2, 2, 19, 21, "crop");
  auto cropped = center_crop_to_multiple(src.samples[0], 4);
  CHECK(cropped.image.shape == Shape{3, 16, 20});
  CHECK(cropped.mask.shape == Shape{16, 20});
  CHECK_THROWS_AS(center_crop_to_multiple(src.samples[0], 32), ShapeError);
}
