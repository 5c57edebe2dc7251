#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <set>

#include "metaseg/dataset.hpp"

using namespace metaseg;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("metaseg_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("ingest_source loads a manifest of valid pairs", "[dataset]") {
  auto dir = temp_dir("ingest");
  auto src = generate_synthetic_source<double>(3, 2, 3, 8, 8, "tiny");
  export_source(src, dir);
  auto loaded = ingest_source<double>(dir);
  REQUIRE(loaded.samples.size() == 3);
  CHECK(loaded.num_classes == 2);
  CHECK(loaded.id == "tiny");
  for (const auto& s : loaded.samples) {
    CHECK(s.source_id == "tiny");
    CHECK(s.image.shape == Shape{3, 8, 8});
    CHECK(s.mask.shape == Shape{8, 8});
  }
}

TEST_CASE("ingest_source rejects out-of-range mask values naming the sample", "[dataset]") {
  auto dir = temp_dir("badmask");
  auto src = generate_synthetic_source<double>(4, 2, 3, 8, 8, "bad");
  src.samples[1].mask.data[5] = 7;  // stored fine as 8-bit, invalid for K=6
  src.num_classes = 6;
  src.class_names = {"a", "b", "c", "d", "e", "f"};
  export_source(src, dir);
  try {
    ingest_source<double>(dir);
    FAIL("expected LabelRangeError");
  } catch (const LabelRangeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("0001") != std::string::npos);
    CHECK(msg.find("7") != std::string::npos);
  }
}

TEST_CASE("export then ingest reproduces tensors bitwise", "[dataset]") {
  auto dir1 = temp_dir("rt1");
  auto dir2 = temp_dir("rt2");
  auto src = generate_synthetic_source<double>(9, 3, 4, 8, 8, "rt");
  export_source(src, dir1);
  auto first = ingest_source<double>(dir1);
  export_source(first, dir2);
  auto second = ingest_source<double>(dir2);
  REQUIRE(first.samples.size() == second.samples.size());
  for (std::size_t i = 0; i < first.samples.size(); ++i) {
    CHECK(first.samples[i].image.data == second.samples[i].image.data);
    CHECK(first.samples[i].mask == second.samples[i].mask);
  }
}

TEST_CASE("ingest_source reports missing files with the path", "[dataset]") {
  auto dir = temp_dir("missing");
  auto src = generate_synthetic_source<double>(5, 2, 2, 8, 8, "gone");
  export_source(src, dir);
  fs::remove(dir / "images" / "0001.png");
  try {
    ingest_source<double>(dir);
    FAIL("expected IngestError");
  } catch (const IngestError& e) {
    CHECK(std::string(e.what()).find("0001.png") != std::string::npos);
  }
}

TEST_CASE("ingest_source rasterizes centroid records when masks are absent", "[dataset]") {
  auto dir = temp_dir("centroids");
  fs::create_directories(dir / "images");
  ImageU8 img;
  img.width = 16;
  img.height = 16;
  img.channels = 3;
  img.data.assign(16 * 16 * 3, 128);
  write_png(dir / "images" / "0000.png", img);
  json manifest = {
      {"name", "cellsrc"},
      {"num_classes", 3},
      {"class_names", {"bg", "a", "b"}},
      {"samples", {{{"image", "images/0000.png"}}}},
      {"centroids",
       {{{"image", "images/0000.png"},
         {"radius", 2.0},
         {"points", {{{"x", 8}, {"y", 8}, {"class", 1}}, {{"x", 2}, {"y", 2}, {"class", 2}}}}}}},
  };
  std::ofstream(dir / "manifest.json") << manifest.dump(2);
  auto src = ingest_source<double>(dir);
  REQUIRE(src.samples.size() == 1);
  const auto& mask = src.samples[0].mask;
  CHECK(mask.data[8 * 16 + 8] == 1);
  CHECK(mask.data[2 * 16 + 2] == 2);
  CHECK(mask.data[15 * 16 + 15] == 0);
}

TEST_CASE("rasterize_centroids radius 1 paints exactly 5 pixels", "[dataset]") {
  auto mask = rasterize_centroids({{4, 4, 1}}, 1.0, 9, 9, 0, 2);
  std::int64_t fg = 0;
  for (const auto v : mask.data) fg += v == 1 ? 1 : 0;
  CHECK(fg == 5);
  CHECK(mask.data[4 * 9 + 4] == 1);
  CHECK(mask.data[3 * 9 + 4] == 1);
  CHECK(mask.data[3 * 9 + 3] == 0);
}

TEST_CASE("rasterize_centroids matches the brute-force integer disk count", "[dataset]") {
  // Lattice points with dx^2+dy^2 <= r^2, counted directly.
  auto brute_count = [](std::int64_t r) {
    std::int64_t n = 0;
    for (std::int64_t dy = -r; dy <= r; ++dy)
      for (std::int64_t dx = -r; dx <= r; ++dx)
        if (dx * dx + dy * dy <= r * r) ++n;
    return n;
  };
  {
    auto mask = rasterize_centroids({{3, 3, 1}}, 2.0, 7, 7, 0, 2);
    std::int64_t fg = 0;
    for (const auto v : mask.data) fg += v;
    CHECK(fg == brute_count(2));
  }
  {
    auto mask = rasterize_centroids({{30, 30, 1}}, 12.0, 61, 61, 0, 2);
    std::int64_t fg = 0;
    for (const auto v : mask.data) fg += v;
    CHECK(fg == brute_count(12));
  }
}

TEST_CASE("rasterize_centroids resolves overlaps to the nearest centroid", "[dataset]") {
  auto mask = rasterize_centroids({{3, 4, 1}, {7, 4, 2}}, 3.0, 9, 11, 0, 3);
  CHECK(mask.data[4 * 11 + 3] == 1);
  CHECK(mask.data[4 * 11 + 7] == 2);
  CHECK(mask.data[4 * 11 + 4] == 1);  // distance 1 vs 3
  CHECK(mask.data[4 * 11 + 5] == 1);  // equidistant: earlier centroid wins
  CHECK(mask.data[4 * 11 + 6] == 2);
  CHECK_THROWS_AS(rasterize_centroids({{1, 1, 9}}, 2.0, 4, 4, 0, 3), LabelRangeError);
}

TEST_CASE("rasterize_centroids is a pure function of its arguments", "[dataset]") {
  std::vector<Centroid> pts = {{3.5, 2.25, 1}, {8.0, 8.0, 2}, {4.0, 9.0, 1}};
  auto a = rasterize_centroids(pts, 4.0, 12, 12, 0, 3);
  auto b = rasterize_centroids(pts, 4.0, 12, 12, 0, 3);
  CHECK(a == b);
}

TEST_CASE("fuse_annotations majority vote with lowest-id ties", "[dataset]") {
  IntMask a({1, 1}, {2});
  IntMask b({1, 1}, {2});
  IntMask c({1, 1}, {5});
  CHECK(fuse_annotations({a, b, c}, 6).data[0] == 2);

  IntMask d({1, 1}, {1});
  IntMask e({1, 1}, {3});
  CHECK(fuse_annotations({d, e}, 4).data[0] == 1);

  IntMask wrong({2, 1}, {0, 0});
  CHECK_THROWS_AS(fuse_annotations({a, wrong}, 6), ShapeError);
}

TEST_CASE("fuse_annotations matches a per-pixel histogram oracle", "[dataset]") {
  Rng rng(17);
  const std::int32_t k = 4;
  std::vector<IntMask> masks;
  for (int ann = 0; ann < 3; ++ann) {
    IntMask m({16, 16});
    for (auto& v : m.data) v = static_cast<std::int32_t>(rng.uniform_int(k));
    masks.push_back(std::move(m));
  }
  auto fused = fuse_annotations(masks, k);
  for (std::int64_t px = 0; px < fused.numel(); ++px) {
    std::array<int, 4> hist{};
    for (const auto& m : masks) hist[static_cast<std::size_t>(m.data[static_cast<std::size_t>(px)])]++;
    std::int32_t expect = 0;
    for (std::int32_t c = 1; c < k; ++c)
      if (hist[static_cast<std::size_t>(c)] > hist[static_cast<std::size_t>(expect)]) expect = c;
    REQUIRE(fused.data[static_cast<std::size_t>(px)] == expect);
  }
}

TEST_CASE("fuse_annotations ignores annotator order at strict-majority pixels", "[dataset]") {
  Rng rng(23);
  const std::int32_t k = 3;
  std::vector<IntMask> masks;
  for (int ann = 0; ann < 3; ++ann) {
    IntMask m({8, 8});
    for (auto& v : m.data) v = static_cast<std::int32_t>(rng.uniform_int(k));
    masks.push_back(std::move(m));
  }
  auto fused = fuse_annotations(masks, k);
  auto permuted = fuse_annotations({masks[2], masks[0], masks[1]}, k);
  for (std::int64_t px = 0; px < fused.numel(); ++px) {
    std::array<int, 3> hist{};
    for (const auto& m : masks) hist[static_cast<std::size_t>(m.data[static_cast<std::size_t>(px)])]++;
    const int top = *std::max_element(hist.begin(), hist.end());
    const bool strict = std::count(hist.begin(), hist.end(), top) == 1;
    if (strict) REQUIRE(fused.data[static_cast<std::size_t>(px)] == permuted.data[static_cast<std::size_t>(px)]);
  }
}

TEST_CASE("generate_synthetic_source covers all classes and is deterministic", "[dataset]") {
  auto a = generate_synthetic_source<double>(7, 3, 10, 16, 16);
  REQUIRE(a.samples.size() == 10);
  std::set<std::int32_t> seen;
  for (const auto& s : a.samples) {
    for (const auto v : s.mask.data) {
      REQUIRE(v >= 0);
      REQUIRE(v < 3);
      seen.insert(v);
    }
    for (const auto v : s.image.data) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
  }
  CHECK(seen == std::set<std::int32_t>{0, 1, 2});

  auto b = generate_synthetic_source<double>(7, 3, 10, 16, 16);
  REQUIRE(b.samples.size() == a.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].image.data == b.samples[i].image.data);
    CHECK(a.samples[i].mask == b.samples[i].mask);
  }
}

TEST_CASE("synthetic class frequencies are near-balanced for K=2", "[dataset]") {
  auto src = generate_synthetic_source<double>(41, 2, 100, 16, 16);
  std::array<std::int64_t, 2> counts{};
  for (const auto& s : src.samples)
    for (const auto v : s.mask.data) counts[static_cast<std::size_t>(v)]++;
  const double total = static_cast<double>(counts[0] + counts[1]);
  for (const auto c : counts) {
    const double freq = static_cast<double>(c) / total;
    CHECK(freq > 0.5 * 0.8);
    CHECK(freq < 0.5 * 1.2);
  }
}

TEST_CASE("split_source partitions deterministically", "[dataset]") {
  auto src = generate_synthetic_source<double>(11, 2, 10, 8, 8);
  auto a = split_source(src, {0.8, 0.2}, 5);
  REQUIRE(a.train.size() == 8);
  REQUIRE(a.val.size() == 2);
  std::set<std::int64_t> all(a.train.begin(), a.train.end());
  all.insert(a.val.begin(), a.val.end());
  CHECK(all.size() == 10);

  auto b = split_source(src, {0.8, 0.2}, 5);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
}

TEST_CASE("split unions cover the full index set", "[dataset]") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t n = 5 + static_cast<std::int64_t>(rng.uniform_int(40));
    auto parts = split_indices(n, {0.6, 0.2, 0.2}, rng.next_u64());
    std::set<std::int64_t> all;
    std::size_t total = 0;
    for (const auto& p : parts) {
      all.insert(p.begin(), p.end());
      total += p.size();
    }
    REQUIRE(total == static_cast<std::size_t>(n));
    REQUIRE(all.size() == static_cast<std::size_t>(n));
  }
}

TEST_CASE("split_source rejects fractions that starve a split", "[dataset]") {
  auto src = generate_synthetic_source<double>(13, 2, 2, 8, 8);
  CHECK_THROWS_AS(split_source(src, {0.9, 0.05, 0.05}, 1), ConfigError);
  CHECK_THROWS_AS(split_source(src, {0.5, 0.2}, 1), ConfigError);  // doesn't sum to 1
}

TEST_CASE("synthetic PNG exports are byte-identical across runs", "[dataset]") {
  auto dir1 = temp_dir("bytes1");
  auto dir2 = temp_dir("bytes2");
  export_source(generate_synthetic_source<double>(77, 3, 2, 12, 12, "b"), dir1);
  export_source(generate_synthetic_source<double>(77, 3, 2, 12, 12, "b"), dir2);
  CHECK(file_bytes(dir1 / "images" / "0000.png") == file_bytes(dir2 / "images" / "0000.png"));
  CHECK(file_bytes(dir1 / "masks" / "0001.png") == file_bytes(dir2 / "masks" / "0001.png"));
}
