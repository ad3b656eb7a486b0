#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include <doctest.h>

#include "ripeloc/augment.hpp"
#include "ripeloc/common.hpp"
#include "ripeloc/data.hpp"
#include "ripeloc/rng.hpp"
#include "ripeloc/synthgen.hpp"

using namespace ripeloc;

namespace {

SceneSpec bare_spec(int n_ripe, int n_unripe) {
  SceneSpec s;
  s.n_ripe_lo = s.n_ripe_hi = n_ripe;
  s.n_unripe_lo = s.n_unripe_hi = n_unripe;
  s.clutter_density = 0.0;
  s.occlusion_p = 0.0;
  return s;
}

struct MaskBox {
  int mnx, mxx, mny, mxy;
  double centroid_x, centroid_y;
  int count;
};

MaskBox mask_box(const InstanceMask& m) {
  MaskBox b{m.w, -1, m.h, -1, 0, 0, 0};
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      if (m.at(y, x)) {
        b.mnx = std::min(b.mnx, x);
        b.mxx = std::max(b.mxx, x);
        b.mny = std::min(b.mny, y);
        b.mxy = std::max(b.mxy, y);
        b.centroid_x += x + 0.5;
        b.centroid_y += y + 0.5;
        ++b.count;
      }
  if (b.count) {
    b.centroid_x /= b.count;
    b.centroid_y /= b.count;
  }
  return b;
}

bool box_touches_frame(const Label& l) {
  return l.cx - l.w / 2 <= 1e-9 || l.cx + l.w / 2 >= 1 - 1e-9 ||
         l.cy - l.h / 2 <= 1e-9 || l.cy + l.h / 2 >= 1 - 1e-9;
}

}  // namespace

// ===== single-scene contracts =====

TEST_CASE("single ripe fruit: one annotation carrying the true disk center") {
  SceneSpec spec = bare_spec(1, 0);
  spec.radius_lo = spec.radius_hi = 12.0;
  int usable = 0, center_off_boxmid = 0;
  for (int seed = 0; seed < 60; ++seed) {
    Rng rng{uint64_t(seed)};
    Sample s = generate(spec, rng);
    REQUIRE(s.labels.size() == 1);
    REQUIRE(s.masks.size() == 1);
    const Label& l = s.labels[0];
    CHECK(l.class_id == 1);
    CHECK(l.has_center);
    validate_label(l);
    if (box_touches_frame(l)) continue;  // clipped disks lose symmetry
    ++usable;
    // a rasterized full disk's pixel centroid sits within a few hundredths
    // of a pixel of the true center: sharp enough to tell the annotated
    // center is the disk center, not the box midpoint
    MaskBox mb = mask_box(s.masks[0]);
    CHECK(std::fabs(l.pcx * 96.0 - mb.centroid_x) < 0.1);
    CHECK(std::fabs(l.pcy * 96.0 - mb.centroid_y) < 0.1);
    if (std::fabs(l.pcx - l.cx) * 96.0 > 0.05) ++center_off_boxmid;
  }
  CHECK(usable >= 20);
  CHECK(center_off_boxmid > 0);  // the center is not just the box midpoint
}

TEST_CASE("fixed seed reproduces the scene bit for bit") {
  SceneSpec spec;
  spec.occlusion_p = 0.4;
  for (uint64_t seed : {3ULL, 1234ULL}) {
    Rng r1(seed), r2(seed);
    GenStats g1, g2;
    Sample a = generate(spec, r1, &g1);
    Sample b = generate(spec, r2, &g2);
    CHECK(a.image.px == b.image.px);
    REQUIRE(a.labels.size() == b.labels.size());
    for (size_t i = 0; i < a.labels.size(); ++i) {
      CHECK(a.labels[i].cx == b.labels[i].cx);
      CHECK(a.labels[i].pcx == b.labels[i].pcx);
    }
    for (size_t i = 0; i < a.masks.size(); ++i)
      CHECK(a.masks[i].on == b.masks[i].on);
    CHECK(g1.requested == g2.requested);
    CHECK(g1.placed == g2.placed);
    CHECK(g1.rejected_attempts == g2.rejected_attempts);
  }
}

TEST_CASE("1000 scenes at ripe share 0.573 land within two points") {
  SceneSpec spec;
  spec.ripe_share = 0.573;
  spec.clutter_density = 0.3;  // rendering detail is irrelevant to the count
  Rng rng(20260817);
  int ripe = 0, total = 0;
  for (int i = 0; i < 1000; ++i) {
    Sample s = generate(spec, rng);
    for (const Label& l : s.labels) {
      ripe += l.class_id == 1;
      ++total;
    }
  }
  const double share = 100.0 * ripe / total;
  CHECK(share > 55.3);
  CHECK(share < 59.3);
}

TEST_CASE("boxes are pixel-tight around the visible mask") {
  SceneSpec spec;
  spec.occlusion_p = 0.5;
  Rng rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    Sample s = generate(spec, rng);
    REQUIRE(s.masks.size() == s.labels.size());
    for (size_t i = 0; i < s.labels.size(); ++i) {
      const Label& l = s.labels[i];
      validate_label(l);
      MaskBox mb = mask_box(s.masks[i]);
      REQUIRE(mb.count > 0);
      // the box edges coincide with the mask extent: zero slack by
      // construction (1e-12 covers the center/size round trip), well within
      // the allowed 1 px
      CHECK(std::fabs(l.cx - l.w / 2 - double(mb.mnx) / 96.0) < 1e-12);
      CHECK(std::fabs(l.cx + l.w / 2 - double(mb.mxx + 1) / 96.0) < 1e-12);
      CHECK(std::fabs(l.cy - l.h / 2 - double(mb.mny) / 96.0) < 1e-12);
      CHECK(std::fabs(l.cy + l.h / 2 - double(mb.mxy + 1) / 96.0) < 1e-12);
      CHECK(l.has_center == (l.class_id == 1));
    }
    // z-order: visible masks never share a pixel
    for (size_t i = 0; i < s.masks.size(); ++i)
      for (size_t j = i + 1; j < s.masks.size(); ++j)
        for (size_t k = 0; k < s.masks[i].on.size(); ++k)
          CHECK((s.masks[i].on[k] & s.masks[j].on[k]) == 0);
  }
}

TEST_CASE("midday fruit pixels stay inside the class hue bands") {
  SceneSpec ripe_spec = bare_spec(2, 0);
  SceneSpec unripe_spec = bare_spec(0, 2);
  Rng rng(17);
  for (int trial = 0; trial < 15; ++trial) {
    Sample rs = generate(ripe_spec, rng);
    for (size_t i = 0; i < rs.masks.size(); ++i)
      for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 96; ++x)
          if (rs.masks[i].at(y, x)) {
            const double h = rgb_to_hsv(rs.image.at(0, y, x),
                                        rs.image.at(1, y, x),
                                        rs.image.at(2, y, x))[0];
            CHECK((h >= 344.9 || h <= 15.1));
          }
    Sample us = generate(unripe_spec, rng);
    for (size_t i = 0; i < us.masks.size(); ++i)
      for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 96; ++x)
          if (us.masks[i].at(y, x)) {
            const double h = rgb_to_hsv(us.image.at(0, y, x),
                                        us.image.at(1, y, x),
                                        us.image.at(2, y, x))[0];
            CHECK(h >= 89.9);
            CHECK(h <= 140.1);
          }
  }
}

TEST_CASE("forced occlusion produces overlapping annotations") {
  SceneSpec spec = bare_spec(3, 0);
  spec.occlusion_p = 1.0;
  spec.radius_lo = spec.radius_hi = 13.0;
  int overlapped_scenes = 0;
  for (int seed = 0; seed < 30; ++seed) {
    Rng rng{uint64_t(seed) + 1000};
    Sample s = generate(spec, rng);
    bool any = false;
    for (size_t i = 0; i < s.labels.size() && !any; ++i)
      for (size_t j = i + 1; j < s.labels.size(); ++j) {
        const Label &a = s.labels[i], &b = s.labels[j];
        const double ix = std::min(a.cx + a.w / 2, b.cx + b.w / 2) -
                          std::max(a.cx - a.w / 2, b.cx - b.w / 2);
        const double iy = std::min(a.cy + a.h / 2, b.cy + b.h / 2) -
                          std::max(a.cy - a.h / 2, b.cy - b.h / 2);
        if (ix > 0 && iy > 0) {
          any = true;
          break;
        }
      }
    overlapped_scenes += any;
  }
  CHECK(overlapped_scenes >= 25);  // occlusion_p = 1 all but guarantees it
}

TEST_CASE("infeasible packing degrades to fewer fruit and reports it") {
  SceneSpec spec = bare_spec(8, 0);
  spec.radius_lo = spec.radius_hi = 30.0;  // at most ~2 fit in 96 px
  Rng rng(5);
  GenStats stats;
  Sample s = generate(spec, rng, &stats);
  CHECK(stats.requested == 8);
  CHECK(stats.placed < stats.requested);
  CHECK(stats.placed >= 1);
  CHECK(stats.rejected_attempts >= 100);
  CHECK(int(s.labels.size()) <= stats.placed);
}

TEST_CASE("illumination presets change the rendering") {
  SceneSpec spec = bare_spec(2, 1);
  std::array<Illumination, 3> ills = {Illumination::Morning,
                                      Illumination::Midday,
                                      Illumination::Afternoon};
  std::array<std::vector<double>, 3> px;
  for (int i = 0; i < 3; ++i) {
    SceneSpec sp = spec;
    sp.illum = ills[size_t(i)];
    Rng rng(888);  // identical draws; only the preset differs
    px[size_t(i)] = generate(sp, rng).image.px;
  }
  CHECK(px[0] != px[1]);
  CHECK(px[1] != px[2]);
  CHECK(px[0] != px[2]);
}

TEST_CASE("validate_spec rejects bad fields") {
  SceneSpec s;
  s.image_size = 8;
  CHECK_THROWS_AS(validate_spec(s), UsageError);
  s = SceneSpec{};
  s.n_ripe_hi = s.n_ripe_lo - 1;
  CHECK_THROWS_AS(validate_spec(s), UsageError);
  s = SceneSpec{};
  s.radius_lo = 0.0;
  CHECK_THROWS_AS(validate_spec(s), UsageError);
  s = SceneSpec{};
  s.occlusion_p = 1.5;
  CHECK_THROWS_AS(validate_spec(s), UsageError);
  s = SceneSpec{};
  s.ripe_share = 1.2;
  CHECK_THROWS_AS(validate_spec(s), UsageError);
}

// ===== difficulty buckets =====

TEST_CASE("difficulty buckets follow crowding and occlusion") {
  auto make = [](int n, bool overlap) {
    Sample s;
    s.image = Image::solid(8, 8, 0, 0, 0);
    for (int i = 0; i < n; ++i) {
      Label l;
      l.class_id = 0;
      l.w = l.h = 0.08;
      l.cx = overlap && i == 1 ? s.labels[0].cx + 0.01 : 0.06 + 0.11 * i;
      l.cy = overlap && i == 1 ? s.labels[0].cy : 0.5;
      s.labels.push_back(l);
    }
    return s;
  };
  CHECK(difficulty_bucket(make(0, false)) == 0);
  CHECK(difficulty_bucket(make(3, false)) == 0);
  CHECK(difficulty_bucket(make(4, false)) == 1);
  CHECK(difficulty_bucket(make(2, true)) == 1);
  CHECK(difficulty_bucket(make(4, true)) == 2);
  CHECK(difficulty_bucket(make(6, false)) == 2);
}

// ===== splits =====

TEST_CASE("1500 images split 1050/225/225") {
  std::vector<int> difficulty(1500, 0);
  Rng rng(1);
  Splits s = make_splits(difficulty, {0.7, 0.15, 0.15}, rng);
  CHECK(s.train.size() == 1050);
  CHECK(s.val.size() == 225);
  CHECK(s.test.size() == 225);
}

TEST_CASE("ten images follow the documented largest-remainder tie-break") {
  std::vector<int> difficulty(10, 0);
  Rng rng(2);
  Splits s = make_splits(difficulty, {0.7, 0.15, 0.15}, rng);
  CHECK(s.train.size() == 7);
  // val and test tie on remainder 0.5; val precedes test in priority
  CHECK(s.val.size() == 2);
  CHECK(s.test.size() == 1);
}

TEST_CASE("splits partition the images") {
  Rng meta(3);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 1 + meta.uniform_int(400);
    std::vector<int> difficulty;
    for (int i = 0; i < n; ++i) difficulty.push_back(meta.uniform_int(3));
    Rng rng{uint64_t(trial)};
    Splits s = make_splits(difficulty, {0.7, 0.15, 0.15}, rng);
    std::vector<int> all;
    all.insert(all.end(), s.train.begin(), s.train.end());
    all.insert(all.end(), s.val.begin(), s.val.end());
    all.insert(all.end(), s.test.begin(), s.test.end());
    REQUIRE(int(all.size()) == n);
    std::sort(all.begin(), all.end());
    for (int i = 0; i < n; ++i) CHECK(all[size_t(i)] == i);
    CHECK(std::is_sorted(s.train.begin(), s.train.end()));
  }
}

TEST_CASE("splits are stratified per difficulty bucket") {
  // bucket sizes 10 / 20 / 40: largest remainder gives 7-2-1, 14-3-3, 28-6-6
  std::vector<int> difficulty;
  difficulty.insert(difficulty.end(), 10, 0);
  difficulty.insert(difficulty.end(), 20, 1);
  difficulty.insert(difficulty.end(), 40, 2);
  Rng rng(4);
  Splits s = make_splits(difficulty, {0.7, 0.15, 0.15}, rng);
  auto count = [&difficulty](const std::vector<int>& ids, int bucket) {
    int c = 0;
    for (int i : ids) c += difficulty[size_t(i)] == bucket;
    return c;
  };
  CHECK(count(s.train, 0) == 7);
  CHECK(count(s.val, 0) == 2);
  CHECK(count(s.test, 0) == 1);
  CHECK(count(s.train, 1) == 14);
  CHECK(count(s.val, 1) == 3);
  CHECK(count(s.test, 1) == 3);
  CHECK(count(s.train, 2) == 28);
  CHECK(count(s.val, 2) == 6);
  CHECK(count(s.test, 2) == 6);
}

TEST_CASE("make_splits validates ratios") {
  std::vector<int> d(5, 0);
  Rng rng(6);
  CHECK_THROWS_AS(make_splits(d, {0.7, 0.2, 0.2}, rng), UsageError);
  CHECK_THROWS_AS(make_splits(d, {1.2, -0.1, -0.1}, rng), UsageError);
}

// ===== dataset writer =====

TEST_CASE("write_dataset lays out splits, images, labels, manifests") {
  namespace fs = std::filesystem;
  const std::string root = "/tmp/ripeloc_ds_test";
  fs::remove_all(root);
  DatasetConfig cfg;
  cfg.root = root;
  cfg.n_images = 20;
  cfg.image_size = 96;
  cfg.seed = 11;
  DatasetSummary sum = write_dataset(cfg);
  CHECK(sum.n_train + sum.n_val + sum.n_test == 20);
  CHECK(sum.n_train >= 12);
  CHECK(sum.n_ripe > 0);
  CHECK(sum.n_unripe > 0);
  CHECK_FALSE(fs::exists(fs::path(root) / "_stage"));

  std::set<std::string> seen;
  int manifest_total = 0;
  for (const char* split : {"train", "val", "test"}) {
    const fs::path dir = fs::path(root) / split;
    std::ifstream manifest(dir / "manifest.txt");
    REQUIRE(manifest.good());
    std::string stem;
    while (std::getline(manifest, stem)) {
      if (stem.empty()) continue;
      ++manifest_total;
      CHECK(seen.insert(stem).second);  // splits are disjoint
      Image img = read_ppm((dir / "images" / (stem + ".ppm")).string());
      CHECK(img.w == 96);
      std::vector<Label> labels =
          read_labels((dir / "labels" / (stem + ".txt")).string());
      for (const Label& l : labels) {
        validate_label(l);
        CHECK(l.has_center == (l.class_id == 1));
      }
    }
  }
  CHECK(manifest_total == 20);
  fs::remove_all(root);
}

TEST_CASE("write_dataset is byte-reproducible for a fixed seed") {
  namespace fs = std::filesystem;
  const std::string r1 = "/tmp/ripeloc_ds_a", r2 = "/tmp/ripeloc_ds_b";
  fs::remove_all(r1);
  fs::remove_all(r2);
  DatasetConfig cfg;
  cfg.n_images = 6;
  cfg.seed = 21;
  cfg.root = r1;
  write_dataset(cfg);
  cfg.root = r2;
  write_dataset(cfg);
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
  };
  for (const char* split : {"train", "val", "test"}) {
    CHECK(slurp(fs::path(r1) / split / "manifest.txt") ==
          slurp(fs::path(r2) / split / "manifest.txt"));
    std::ifstream manifest(fs::path(r1) / split / "manifest.txt");
    std::string stem;
    while (std::getline(manifest, stem)) {
      if (stem.empty()) continue;
      CHECK(slurp(fs::path(r1) / split / "images" / (stem + ".ppm")) ==
            slurp(fs::path(r2) / split / "images" / (stem + ".ppm")));
      CHECK(slurp(fs::path(r1) / split / "labels" / (stem + ".txt")) ==
            slurp(fs::path(r2) / split / "labels" / (stem + ".txt")));
    }
  }
  fs::remove_all(r1);
  fs::remove_all(r2);
}

TEST_CASE("write_dataset validates its config") {
  DatasetConfig cfg;
  cfg.root = "";
  CHECK_THROWS_AS(write_dataset(cfg), UsageError);
  cfg.root = "/tmp/ripeloc_ds_bad";
  cfg.n_images = 0;
  CHECK_THROWS_AS(write_dataset(cfg), UsageError);
  cfg.n_images = 4;
  cfg.image_size = 50;
  CHECK_THROWS_AS(write_dataset(cfg), UsageError);
  cfg.image_size = 96;
  cfg.preset = "dreamy";
  CHECK_THROWS_AS(write_dataset(cfg), UsageError);
  std::filesystem::remove_all("/tmp/ripeloc_ds_bad");
}

TEST_CASE("pretask preset is denser than standard") {
  namespace fs = std::filesystem;
  const std::string root = "/tmp/ripeloc_ds_pre";
  fs::remove_all(root);
  DatasetConfig cfg;
  cfg.root = root;
  cfg.n_images = 12;
  cfg.seed = 31;
  DatasetSummary std_sum = write_dataset(cfg);
  fs::remove_all(root);
  cfg.preset = "pretask";
  DatasetSummary pre_sum = write_dataset(cfg);
  fs::remove_all(root);
  CHECK(pre_sum.n_ripe + pre_sum.n_unripe > std_sum.n_ripe + std_sum.n_unripe);
}
