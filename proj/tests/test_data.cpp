#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "flowseg/data.hpp"
#include "flowseg/rng.hpp"

using namespace flowseg;
using namespace flowseg::data;
namespace fs = std::filesystem;

namespace {

/// 64 x 640 section whose left half of every split is salt.
Section half_salt_section() {
  Section s;
  s.id = "half";
  Rng rng(1);
  s.image = rng.normal_array({64, 640});
  s.mask = NdArr({64, 640});
  s.splits = {{"train", 0, 384}, {"val", 384, 512}, {"test", 512, 640}};
  for (const auto& r : s.splits)
    for (std::int64_t h = 0; h < 64; ++h)
      for (std::int64_t w = r.begin; w < (r.begin + r.end) / 2; ++w) s.mask[h * 640 + w] = 1;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Concatenated bytes of every file under a directory, in path order.
std::string tree_bytes(const fs::path& dir) {
  std::set<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.insert(fs::relative(e.path(), dir));
  std::string out;
  for (const auto& f : files) out += f.string() + '\n' + slurp(dir / f);
  return out;
}

}  // namespace

TEST_CASE("normalize_image") {
  const NdArr a = normalize_image(NdArr::from({0, 2}));
  CHECK(a[0] == doctest::Approx(-1).epsilon(1e-15));
  CHECK(a[1] == doctest::Approx(1).epsilon(1e-15));
  Rng rng(2);
  const NdArr n = normalize_image(rng.normal_array({20, 30}, 3));
  double m = 0, v = 0;
  for (auto x : n.vec()) m += x;
  m /= double(n.size());
  for (auto x : n.vec()) v += (x - m) * (x - m);
  CHECK(std::abs(m) < 1e-10);
  CHECK(std::abs(std::sqrt(v / double(n.size())) - 1) < 1e-10);
  CHECK(max_abs_diff(normalize_image(n), n) < 1e-12);
  CHECK_THROWS_AS(normalize_image(NdArr({3, 3}, 7.25)), Error);
}

TEST_CASE("velocity_to_mask") {
  CHECK(velocity_to_mask(NdArr::from({1, 3, 5}), 4, 0, 10) == NdArr::from({0, 0, 1}));
  CHECK(velocity_to_mask(NdArr::from({1, 3, 5}), 1, 0, 10) == NdArr::from({1, 1, 1}));
  CHECK(velocity_to_mask(NdArr::from({1, 99}), 10, 0, 10) == NdArr::from({0, 1}));
  CHECK_THROWS_AS(velocity_to_mask(NdArr::from({1}), 4, 10, 0), Error);
  CHECK_THROWS_AS(velocity_to_mask(NdArr::from({1}), 40, 0, 10), Error);
}

TEST_CASE("patch grid") {
  CHECK(grid_anchors(64, 64, 0.5) == std::vector<std::int64_t>{0});
  CHECK(grid_stride(64, 0.9) == 6);
  CHECK(grid_anchors(128, 64, 0.9).size() == 12);
  CHECK(grid_anchors(128, 64, 0.9).back() == 64);
  CHECK(grid_anchors(128, 64, 0.1) == std::vector<std::int64_t>{0, 58, 64});
  CHECK_THROWS_AS(grid_anchors(32, 64, 0.1), Error);
  CHECK_THROWS_AS(grid_stride(16, 1.0), Error);
  CHECK_THROWS_AS(grid_stride(16, -0.1), Error);

  SUBCASE("closed-form count and coverage over many geometries") {
    for (std::int64_t extent : {16, 17, 33, 64, 100, 128, 384})
      for (std::int64_t patch : {4, 8, 16})
        for (Real ov : {0.0, 0.1, 0.5, 0.9, 0.95}) {
          if (patch > extent) continue;
          const auto a = grid_anchors(extent, patch, ov);
          CHECK(static_cast<std::int64_t>(a.size()) == grid_count(extent, patch, ov));
          CHECK(a.front() == 0);
          CHECK(a.back() + patch == extent);
          for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i] - a[i - 1] <= patch);
        }
  }

  SUBCASE("adjacent overlap fraction within one pixel of rounding") {
    for (Real ov : {0.1, 0.25, 0.5, 0.9}) {
      const auto s = grid_stride(64, ov);
      CHECK(std::abs((64 - s) - 64 * ov) <= 1);
    }
  }

  SUBCASE("crops come from the right place and respect the column range") {
    Section s = half_salt_section();
    const auto pairs = extract_patch_grid(s, 16, 0.1, 384, 512, "val");
    CHECK(pairs.size() == std::size_t(grid_count(64, 16, 0.1) * grid_count(128, 16, 0.1)));
    for (const auto& p : pairs) {
      CHECK(p.origin.col >= 384);
      CHECK(p.origin.col + 16 <= 512);
      CHECK(p.x[0] == s.image[p.origin.row * 640 + p.origin.col]);
      CHECK(p.x[255] == s.image[(p.origin.row + 15) * 640 + p.origin.col + 15]);
    }
  }
}

TEST_CASE("salt fraction and boundary filter") {
  CHECK(salt_fraction(NdArr({4, 4})) == 0);
  NdArr half({64, 64});
  for (std::int64_t i = 0; i < 64 * 32; ++i) half[i] = 1;
  CHECK(salt_fraction(half) == 0.5);
  NdArr y({64, 64});
  for (std::int64_t i = 0; i < 410; ++i) y[i] = 1;
  CHECK(salt_fraction(y) == doctest::Approx(410.0 / 4096).epsilon(1e-15));
  CHECK_THROWS_AS(salt_fraction(NdArr::from({0.5})), Error);

  NdArr tenth({10, 10});
  for (int i = 0; i < 10; ++i) tenth[i] = 1;
  std::vector<PatchPair> pairs{{NdArr({10, 10}), NdArr({10, 10}, 1), {"a"}},
                               {NdArr({10, 10}), tenth, {"b"}},
                               {NdArr({10, 10}), NdArr({10, 10}), {"c"}},
                               {NdArr({10, 10}), hflip(tenth), {"d"}}};
  const auto kept = filter_boundary_patches(pairs);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].origin.section == "b");
  CHECK(kept[1].origin.section == "d");
  CHECK_THROWS_AS(filter_boundary_patches(pairs, 0.5, 0.5), Error);
}

TEST_CASE("hflip_augment") {
  Rng rng(3);
  NdArr sym({4, 4});
  for (std::int64_t r = 0; r < 4; ++r)
    for (std::int64_t c = 0; c < 2; ++c) sym[r * 4 + c] = sym[r * 4 + 3 - c] = static_cast<Real>(rng.normal());
  const std::vector<PatchPair> pairs{{sym, NdArr({4, 4}), {"s"}}, {rng.normal_array({4, 4}), NdArr({4, 4}), {"r"}}};
  const auto out = hflip_augment(pairs);
  REQUIRE(out.size() == 4);
  CHECK(out[2].x == sym);
  CHECK(out[2].origin.flipped);
  CHECK_FALSE(out[0].origin.flipped);
  CHECK(hflip(hflip(pairs[1].x)) == pairs[1].x);
  CHECK(out[3].x[0] == pairs[1].x[3]);
}

TEST_CASE("build_datasets") {
  const Section s = half_salt_section();
  const DatasetConfig cfg;
  const auto d = build_datasets({s}, cfg);

  SUBCASE("generative count equals the filtered closed-form grid") {
    std::int64_t expected = 0;
    for (const char* name : {"train", "val"}) {
      const auto& r = *std::find_if(s.splits.begin(), s.splits.end(), [&](const SplitRange& x) { return x.name == name; });
      for (auto row : grid_anchors(64, 16, 0.9)) {
        (void)row;
        for (auto col : grid_anchors(r.end - r.begin, 16, 0.9)) {
          const std::int64_t c0 = r.begin + col, mid = (r.begin + r.end) / 2;
          const double f = double(std::clamp<std::int64_t>(mid - c0, 0, 16)) / 16;
          expected += f >= 0.1 && f <= 0.9;
        }
      }
    }
    CHECK(d.generative.size() == 2 * expected);
    CHECK(d.generative.splits.count("test") == 0);
    for (const auto& p : all_pairs(d.generative)) {
      const Real f = salt_fraction(p.y);
      CHECK((f >= 0.1 && f <= 0.9));
    }
  }

  SUBCASE("segmentation covers every anchor of every split") {
    for (const auto& r : s.splits) {
      const auto n = grid_count(64, 16, 0.1) * grid_count(r.end - r.begin, 16, 0.1);
      CHECK(static_cast<std::int64_t>(d.segmentation.splits.at(r.name).size()) == 2 * n);
      for (const auto& p : d.segmentation.splits.at(r.name)) {
        CHECK(p.origin.split == r.name);
        CHECK(p.origin.col >= r.begin);
        CHECK(p.origin.col + 16 <= r.end);
      }
    }
  }

  SUBCASE("flips preserve salt fraction") {
    const auto& tr = d.generative.splits.at("train");
    const auto half_n = tr.size() / 2;
    for (std::size_t i = 0; i < half_n; ++i) CHECK(salt_fraction(tr[i].y) == salt_fraction(tr[i + half_n].y));
  }

  SUBCASE("rebuilds are byte-identical on disk and round-trip") {
    const fs::path a = fs::temp_directory_path() / "flowseg_test_ds_a";
    const fs::path b = fs::temp_directory_path() / "flowseg_test_ds_b";
    save_dataset(a, d.generative);
    save_dataset(b, build_datasets({s}, cfg).generative);
    CHECK(tree_bytes(a) == tree_bytes(b));
    const auto back = load_dataset(a);
    CHECK(back.size() == d.generative.size());
    CHECK(back.manifest == d.generative.manifest);
    CHECK(back.splits.at("val")[3].x == d.generative.splits.at("val")[3].x);
    CHECK(back.splits.at("val")[3].origin.col == d.generative.splits.at("val")[3].origin.col);
    fs::remove_all(a);
    fs::remove_all(b);
  }

  SUBCASE("invalid sections") {
    Section bad = s;
    bad.splits[1].begin = 380;
    CHECK_THROWS_AS(build_datasets({bad}, cfg), Error);
    Section empty = s;
    empty.mask.fill(0);
    CHECK_THROWS_AS(build_datasets({empty}, cfg), Error);
  }
}

TEST_CASE("demo section and descriptors") {
  const auto d = demo_section(5);
  CHECK(d.section.image.shape() == Shape{64, 640});
  validate_section(d.section);
  const Real f = salt_fraction(d.section.mask);
  CHECK((f > 0.05 && f < 0.5));
  CHECK(demo_section(5).section.image == d.section.image);
  const auto ds = build_datasets({d.section}, DatasetConfig{});
  CHECK(ds.generative.splits.at("train").size() > 200);
  CHECK(ds.generative.splits.at("val").size() > 20);

  const fs::path dir = fs::temp_directory_path() / "flowseg_test_section";
  fs::remove_all(dir);
  fs::create_directories(dir);
  io::save_ndarray(dir / "image.bin", d.section.image);
  io::save_ndarray(dir / "velocity.bin", d.velocity);
  io::write_json(dir / "section.json", {{"id", "demo"},
                                        {"image", "image.bin"},
                                        {"velocity", "velocity.bin"},
                                        {"threshold", 4400},
                                        {"clip_lo", 1400},
                                        {"clip_hi", 5000},
                                        {"splits", {{{"name", "train"}, {"begin", 0}, {"end", 384}},
                                                    {{"name", "val"}, {"begin", 384}, {"end", 512}},
                                                    {{"name", "test"}, {"begin", 512}, {"end", 640}}}}});
  const Section loaded = load_section(dir / "section.json");
  CHECK(loaded.mask == d.section.mask);
  CHECK(loaded.provenance.contains("velocity_file_hash"));
  io::write_json(dir / "bad.json", {{"id", "x"}, {"image", "image.bin"}, {"splits", io::json::array()}});
  CHECK_THROWS_AS(load_section(dir / "bad.json"), Error);
  io::write_json(dir / "typo.json", {{"id", "x"}, {"imgae", "image.bin"}});
  CHECK_THROWS_WITH_AS(load_section(dir / "typo.json"), doctest::Contains("imgae"), Error);
  CHECK_THROWS_AS(load_section(dir / "missing.json"), Error);
  fs::remove_all(dir);
}

TEST_CASE("half-plane masks") {
  const NdArr m = half_plane_masks(50, 16, 4);
  CHECK(m.shape() == Shape{50, 1, 16, 16});
  for (std::int64_t k = 0; k < 50; ++k) {
    NdArr y(Shape{256}, std::vector<Real>(m.vec().begin() + k * 256, m.vec().begin() + (k + 1) * 256));
    const Real f = salt_fraction(y);
    CHECK((f >= 0.1 && f <= 0.9));
  }
  CHECK(half_plane_masks(50, 16, 4) == m);
}
