#pragma once
// ===== Label-consistent training-time augmentation =====
//
// Every transform keeps the label invariants from data.hpp: boxes stay in the
// unit frame with positive extent, centers stay inside their (possibly
// clipped) boxes. Transforms that clip geometry (scale, mosaic) drop a box
// when its visible area falls under 10% of the original and clamp surviving
// centers into the clipped box.
//
// Masks ride along where the geometry stays per-instance (flip, scale, erase,
// hsv, copy-paste) and are dropped by the image-combining transforms (mosaic,
// mixup). copy_paste reads the donor's masks when present and degrades to
// box-region paste otherwise — the documented limitation for non-synthetic
// imagery.
//
// Determinism: every random draw comes from the caller's Rng in a fixed
// order, so one seed yields one bit-exact augmented sample.

#include <array>
#include <functional>

#include "ripeloc/data.hpp"
#include "ripeloc/rng.hpp"

namespace ripeloc {

struct AugConfig {
  // fractional gains: hue shift within ±hsv_h of a full turn, saturation and
  // value gains within [1-hsv_s, 1+hsv_s] / [1-hsv_v, 1+hsv_v]
  double hsv_h = 0.0, hsv_s = 0.0, hsv_v = 0.0;
  double flip_p = 0.0;
  double scale_lo = 1.0, scale_hi = 1.0;
  double mosaic_p = 0.0;
  // probability of mixup AND the mean donor blend weight (Beta(32, 32(1-p)/p))
  double mixup_alpha_weight = 0.0;
  double copypaste_p = 0.0;
  double erase_p = 0.0;
  uint64_t seed = 0;
};

// probabilities in [0,1], hsv_h in [0, 0.5], hsv_s/hsv_v in [0,1],
// 0 < scale_lo <= scale_hi; violations throw UsageError
void validate_aug(const AugConfig& cfg);

// phase presets; enabled transforms form a strict chain light < moderate <
// heavy (the trainer anneals strength downward across phases)
enum class AugStrength { Light, Moderate, Heavy };
AugConfig aug_preset(AugStrength s, uint64_t seed);

// HSV triples: greenhouse-calibrated vs. the stock detector defaults
void set_greenhouse_hsv(AugConfig& cfg);  // 0.042 / 0.5 / 0.5
void set_stock_hsv(AugConfig& cfg);       // 0.015 / 0.7 / 0.4

// --- color space (hexcone) ---
// h in [0,360), s and v in [0,1]; round trip exact within 1e-6
std::array<double, 3> rgb_to_hsv(double r, double g, double b);
std::array<double, 3> hsv_to_rgb(double h, double s, double v);

// --- individual transforms ---
// zero gains return the input bit-exactly; a pure hue shift preserves every
// pixel's v channel bitwise (the conversion assigns the max channel from v)
Image hsv_jitter(const Image& img, const AugConfig& cfg, Rng& rng);

Sample hflip(const Sample& s);

// isotropic resample about the image center by f in [lo, hi]; box areas
// scale by exactly f^2 before clipping; vacated pixels take mid-gray
Sample random_scale(const Sample& s, double lo, double hi, Rng& rng);

// tiles the four samples around a jittered center, clipping labels to their
// quadrants; fewer than four samples is a UsageError
Sample mosaic(const std::array<Sample, 4>& samples, Rng& rng);

// lam*a + (1-lam)*b with the union of both label sets
Sample mixup(const Sample& a, const Sample& b, double lam);

// transplants one random donor instance (mask paste when the donor carries
// masks, box-region paste otherwise) at a random in-frame position, adding
// exactly one annotation of the donor's class; empty donor is a no-op
Sample copy_paste(const Sample& a, const Sample& donor, Rng& rng);

// blanks one random rectangle (2..20% of the area) to mid-gray; labels stay
Sample random_erase(const Sample& a, Rng& rng);

// --- pipeline ---
// donor provider for mosaic/mixup/copy-paste; index is uniform over n_source
using SampleSource = std::function<Sample(int)>;

// applies the configured transforms in a fixed order: mosaic, copy-paste,
// mixup, hsv, flip, scale, erase
Sample augment_sample(const Sample& base, const SampleSource& source,
                      int n_source, const AugConfig& cfg, Rng& rng);

}  // namespace ripeloc
