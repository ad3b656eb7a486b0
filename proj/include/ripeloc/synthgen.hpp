#pragma once
// ===== Deterministic synthetic greenhouse scenes =====
//
// Fruit are shaded disks: radial falloff plus a specular highlight whose
// direction follows the illumination preset. Ripe hue is drawn from the
// wrapping band [345, 15) degrees, unripe from [90, 140) — the same band the
// leaf clutter uses, so unripe fruit sit green-on-green by construction.
//
// Overlapping disks occlude in placement order (later on top). Each
// annotation's mask holds exactly the visible pixels, the box is derived
// from that mask (pixel-tight), and ripe labels carry the true disk center,
// clamped into the box when occlusion pushes it outside.
//
// Generation is a pure function of (spec, rng state): one seed, one scene.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ripeloc/data.hpp"
#include "ripeloc/rng.hpp"

namespace ripeloc {

enum class Illumination { Morning, Midday, Afternoon };

struct SceneSpec {
  int image_size = 96;
  // per-class instance count ranges, inclusive
  int n_ripe_lo = 1, n_ripe_hi = 4;
  int n_unripe_lo = 0, n_unripe_hi = 3;
  // when >= 0, replaces the per-class split: the total count is still the
  // sum of both range draws, but each fruit is ripe with this probability
  // (mirrors the dataset's published 57.3% ripe share)
  double ripe_share = -1.0;
  double radius_lo = 7.0, radius_hi = 14.0;  // px
  // chance a fruit is deliberately placed overlapping an earlier one
  double occlusion_p = 0.25;
  // leaf ellipses + stem strokes per 1000 px^2 of frame
  double clutter_density = 1.0;
  Illumination illum = Illumination::Midday;
};

// ranges ordered and non-negative, radii positive, probabilities in [0,1],
// image_size >= 16; violations throw UsageError
void validate_spec(const SceneSpec& spec);

struct GenStats {
  int requested = 0;
  int placed = 0;
  // placement attempts discarded by the non-overlap rejection rule; when a
  // fruit exhausts 100 attempts it is skipped (placed < requested)
  int rejected_attempts = 0;
};

// One scene: image + labels (class 0 unripe, 1 ripe; ripe carry centers)
// + one visible-pixel mask per label, in the same order.
Sample generate(const SceneSpec& spec, Rng& rng, GenStats* stats = nullptr);

// difficulty bucket for stratified splits: 0 easy, 1 medium (crowded or
// occluded), 2 hard (both / heavily crowded); pure function of annotations
int difficulty_bucket(const Sample& sample);

struct Splits {
  std::vector<int> train, val, test;  // indices, each sorted ascending
};

// Stratified largest-remainder split: within every difficulty bucket the
// shuffled members are divided per `ratios` (floor + largest fractional
// remainder, ties resolved train > val > test). Ratios must be non-negative
// and sum to 1 (UsageError otherwise).
Splits make_splits(const std::vector<int>& difficulty,
                   const std::array<double, 3>& ratios, Rng& rng);

// ===== dataset writer (layout owned by the cli module) =====
//
//   <root>/<split>/images/<stem>.ppm
//   <root>/<split>/labels/<stem>.txt
//   <root>/<split>/manifest.txt      (one stem per line, sorted)
//
// presets: "standard" (midday-weighted illumination mix) and "pretask"
// (denser clutter, uniform illumination mix — the backbone pre-task).

struct DatasetConfig {
  std::string root;
  int n_images = 100;
  int image_size = 96;
  std::string preset = "standard";
  std::array<double, 3> ratios = {0.7, 0.15, 0.15};
  uint64_t seed = 0;
};

struct DatasetSummary {
  int n_train = 0, n_val = 0, n_test = 0;
  int n_ripe = 0, n_unripe = 0;
  int packing_shortfalls = 0;  // images that placed fewer fruit than drawn
};

DatasetSummary write_dataset(const DatasetConfig& cfg);

}  // namespace ripeloc
