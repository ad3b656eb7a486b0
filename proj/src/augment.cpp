#include "ripeloc/augment.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ripeloc/common.hpp"

namespace ripeloc {

namespace {

constexpr double kFillGray = 0.5;  // vacated / erased pixels

// clips a label to a rect; drops it when the visible share of the box area
// falls under 10%; clamps any center into the clipped box
bool clip_label(const Label& in, double rx1, double ry1, double rx2,
                double ry2, Label* out) {
  const double x1 = in.cx - in.w / 2, x2 = in.cx + in.w / 2;
  const double y1 = in.cy - in.h / 2, y2 = in.cy + in.h / 2;
  const double ix1 = std::max(x1, rx1), ix2 = std::min(x2, rx2);
  const double iy1 = std::max(y1, ry1), iy2 = std::min(y2, ry2);
  if (ix2 <= ix1 || iy2 <= iy1) return false;
  const double visible = (ix2 - ix1) * (iy2 - iy1);
  if (visible < 0.10 * (x2 - x1) * (y2 - y1)) return false;
  out->class_id = in.class_id;
  out->cx = (ix1 + ix2) / 2;
  out->cy = (iy1 + iy2) / 2;
  out->w = ix2 - ix1;
  out->h = iy2 - iy1;
  out->has_center = in.has_center;
  if (in.has_center) {
    out->pcx = clampd(in.pcx, ix1, ix2);
    out->pcy = clampd(in.pcy, iy1, iy2);
  }
  return true;
}

void need_same_dims(const Image& a, const Image& b, const char* who) {
  if (a.w != b.w || a.h != b.h)
    throw ShapeError(std::string(who) + ": image dims differ (" +
                     std::to_string(a.w) + "x" + std::to_string(a.h) + " vs " +
                     std::to_string(b.w) + "x" + std::to_string(b.h) + ")");
}

}  // namespace

// ===== config =====

void validate_aug(const AugConfig& cfg) {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0))
      throw UsageError(std::string("augment config: ") + name +
                       " outside [0,1]");
  };
  if (!(cfg.hsv_h >= 0.0 && cfg.hsv_h <= 0.5))
    throw UsageError("augment config: hsv_h outside [0, 0.5]");
  prob(cfg.hsv_s, "hsv_s");
  prob(cfg.hsv_v, "hsv_v");
  prob(cfg.flip_p, "flip_p");
  prob(cfg.mosaic_p, "mosaic_p");
  prob(cfg.mixup_alpha_weight, "mixup_alpha_weight");
  prob(cfg.copypaste_p, "copypaste_p");
  prob(cfg.erase_p, "erase_p");
  if (!(cfg.scale_lo > 0.0 && cfg.scale_lo <= cfg.scale_hi))
    throw UsageError("augment config: need 0 < scale_lo <= scale_hi");
}

void set_greenhouse_hsv(AugConfig& cfg) {
  cfg.hsv_h = 0.042;
  cfg.hsv_s = 0.5;
  cfg.hsv_v = 0.5;
}

void set_stock_hsv(AugConfig& cfg) {
  cfg.hsv_h = 0.015;
  cfg.hsv_s = 0.7;
  cfg.hsv_v = 0.4;
}

AugConfig aug_preset(AugStrength s, uint64_t seed) {
  AugConfig cfg;
  cfg.seed = seed;
  set_greenhouse_hsv(cfg);
  cfg.flip_p = 0.5;
  if (s == AugStrength::Light) return cfg;
  cfg.scale_lo = 0.5;
  cfg.scale_hi = 1.5;
  cfg.mosaic_p = 0.5;
  cfg.mixup_alpha_weight = 0.3;
  if (s == AugStrength::Moderate) return cfg;
  cfg.mosaic_p = 1.0;
  cfg.copypaste_p = 0.2;
  cfg.erase_p = 0.1;
  return cfg;
}

// ===== color space =====

std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double v = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = v - mn;
  const double s = v == 0.0 ? 0.0 : d / v;
  double h = 0.0;
  if (d != 0.0) {
    if (v == r)
      h = 60.0 * ((g - b) / d);
    else if (v == g)
      h = 60.0 * ((b - r) / d + 2.0);
    else
      h = 60.0 * ((r - g) / d + 4.0);
    if (h < 0.0) h += 360.0;
  }
  return {h, s, v};
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  if (s == 0.0) return {v, v, v};
  double hh = std::fmod(h, 360.0);
  if (hh < 0.0) hh += 360.0;
  hh /= 60.0;
  int i = int(hh);
  if (i > 5) i = 5;
  const double f = hh - i;
  // the max channel is assigned v itself, so pure hue shifts keep v bitwise
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// ===== transforms =====

Image hsv_jitter(const Image& img, const AugConfig& cfg, Rng& rng) {
  const double dh = rng.uniform(-cfg.hsv_h, cfg.hsv_h) * 360.0;
  const double sg = rng.uniform(1.0 - cfg.hsv_s, 1.0 + cfg.hsv_s);
  const double vg = rng.uniform(1.0 - cfg.hsv_v, 1.0 + cfg.hsv_v);
  if (dh == 0.0 && sg == 1.0 && vg == 1.0) return img;  // identity, bit-exact
  Image out = img;
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      const auto hsv = rgb_to_hsv(img.at(0, y, x), img.at(1, y, x),
                                  img.at(2, y, x));
      const double h = std::fmod(hsv[0] + dh + 360.0, 360.0);
      const double s = clampd(hsv[1] * sg, 0.0, 1.0);
      const double v = clampd(hsv[2] * vg, 0.0, 1.0);
      const auto rgb = hsv_to_rgb(h, s, v);
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = rgb[size_t(c)];
    }
  }
  return out;
}

Sample hflip(const Sample& s) {
  Sample out = s;
  const int w = s.image.w;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < s.image.h; ++y)
      for (int x = 0; x < w; ++x)
        out.image.at(c, y, x) = s.image.at(c, y, w - 1 - x);
  for (Label& l : out.labels) {
    l.cx = 1.0 - l.cx;
    if (l.has_center) l.pcx = 1.0 - l.pcx;
  }
  for (size_t m = 0; m < out.masks.size(); ++m)
    for (int y = 0; y < s.image.h; ++y)
      for (int x = 0; x < w; ++x)
        out.masks[m].set(y, x, s.masks[m].at(y, w - 1 - x));
  return out;
}

Sample random_scale(const Sample& s, double lo, double hi, Rng& rng) {
  if (!(lo > 0.0 && lo <= hi))
    throw UsageError("random_scale: need 0 < lo <= hi");
  const double f = rng.uniform(lo, hi);
  if (f == 1.0) return s;
  Sample out;
  const int w = s.image.w, h = s.image.h;
  out.image = Image::solid(w, h, kFillGray, kFillGray, kFillGray);
  // nearest-neighbor resample about the image center
  auto src_of = [f](int o, int extent) {
    const double src = (o + 0.5 - extent / 2.0) / f + extent / 2.0 - 0.5;
    return int(std::floor(src + 0.5));
  };
  std::vector<int> sx(static_cast<size_t>(w));
  std::vector<int> sy(static_cast<size_t>(h));
  for (int x = 0; x < w; ++x) sx[size_t(x)] = src_of(x, w);
  for (int y = 0; y < h; ++y) sy[size_t(y)] = src_of(y, h);
  for (int y = 0; y < h; ++y) {
    if (sy[size_t(y)] < 0 || sy[size_t(y)] >= h) continue;
    for (int x = 0; x < w; ++x) {
      if (sx[size_t(x)] < 0 || sx[size_t(x)] >= w) continue;
      for (int c = 0; c < 3; ++c)
        out.image.at(c, y, x) = s.image.at(c, sy[size_t(y)], sx[size_t(x)]);
    }
  }
  const bool with_masks = s.masks.size() == s.labels.size() && !s.masks.empty();
  for (size_t li = 0; li < s.labels.size(); ++li) {
    const Label& l = s.labels[li];
    Label moved = l;
    moved.cx = (l.cx - 0.5) * f + 0.5;
    moved.cy = (l.cy - 0.5) * f + 0.5;
    moved.w = l.w * f;
    moved.h = l.h * f;
    if (l.has_center) {
      moved.pcx = (l.pcx - 0.5) * f + 0.5;
      moved.pcy = (l.pcy - 0.5) * f + 0.5;
    }
    Label clipped;
    if (!clip_label(moved, 0.0, 0.0, 1.0, 1.0, &clipped)) continue;
    out.labels.push_back(clipped);
    if (with_masks) {
      InstanceMask m;
      m.w = w;
      m.h = h;
      m.on.assign(size_t(w) * size_t(h), 0);
      for (int y = 0; y < h; ++y) {
        if (sy[size_t(y)] < 0 || sy[size_t(y)] >= h) continue;
        for (int x = 0; x < w; ++x) {
          if (sx[size_t(x)] < 0 || sx[size_t(x)] >= w) continue;
          if (s.masks[li].at(sy[size_t(y)], sx[size_t(x)])) m.set(y, x, true);
        }
      }
      out.masks.push_back(m);
    }
  }
  return out;
}

Sample mosaic(const std::array<Sample, 4>& samples, Rng& rng) {
  for (int q = 0; q < 4; ++q)
    if (samples[size_t(q)].image.w <= 0 || samples[size_t(q)].image.h <= 0)
      throw UsageError("mosaic: needs four non-empty samples");
  for (int q = 1; q < 4; ++q)
    need_same_dims(samples[0].image, samples[size_t(q)].image, "mosaic");
  const int w = samples[0].image.w, h = samples[0].image.h;
  const double jx = rng.uniform(0.25, 0.75);
  const double jy = rng.uniform(0.25, 0.75);
  const int sx = int(std::lround(jx * w));
  const int sy = int(std::lround(jy * h));

  Sample out;
  out.image = Image::solid(w, h, 0, 0, 0);
  // quadrant windows are axis-aligned crops of each source at the same spot
  const std::array<std::array<int, 4>, 4> rects = {{{0, 0, sx, sy},
                                                    {sx, 0, w, sy},
                                                    {0, sy, sx, h},
                                                    {sx, sy, w, h}}};
  for (int q = 0; q < 4; ++q) {
    const auto& r = rects[size_t(q)];
    const Image& src = samples[size_t(q)].image;
    for (int y = r[1]; y < r[3]; ++y)
      for (int x = r[0]; x < r[2]; ++x)
        for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = src.at(c, y, x);
    const double rx1 = double(r[0]) / w, ry1 = double(r[1]) / h;
    const double rx2 = double(r[2]) / w, ry2 = double(r[3]) / h;
    for (const Label& l : samples[size_t(q)].labels) {
      Label clipped;
      if (clip_label(l, rx1, ry1, rx2, ry2, &clipped))
        out.labels.push_back(clipped);
    }
  }
  return out;  // masks do not survive image combination
}

Sample mixup(const Sample& a, const Sample& b, double lam) {
  if (!(lam >= 0.0 && lam <= 1.0))
    throw UsageError("mixup: lambda outside [0,1]");
  need_same_dims(a.image, b.image, "mixup");
  Sample out;
  out.image = a.image;
  for (size_t k = 0; k < out.image.px.size(); ++k)
    out.image.px[k] = lam * a.image.px[k] + (1.0 - lam) * b.image.px[k];
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;  // masks do not survive image combination
}

Sample copy_paste(const Sample& a, const Sample& donor, Rng& rng) {
  if (donor.labels.empty()) return a;
  need_same_dims(a.image, donor.image, "copy_paste");
  const int w = a.image.w, h = a.image.h;
  const size_t di = size_t(rng.uniform_int(int(donor.labels.size())));
  const Label& dl = donor.labels[di];

  // integer-pixel translation keeps pixels, mask, and label exactly aligned
  const double x1 = dl.cx - dl.w / 2, x2 = dl.cx + dl.w / 2;
  const double y1 = dl.cy - dl.h / 2, y2 = dl.cy + dl.h / 2;
  const int bx1 = std::max(0, int(std::floor(x1 * w)));
  const int bx2 = std::min(w - 1, int(std::ceil(x2 * w)) - 1);
  const int by1 = std::max(0, int(std::floor(y1 * h)));
  const int by2 = std::min(h - 1, int(std::ceil(y2 * h)) - 1);
  const int dx_lo = -bx1, dx_hi = w - 1 - bx2;
  const int dy_lo = -by1, dy_hi = h - 1 - by2;
  const int ddx = dx_lo + rng.uniform_int(dx_hi - dx_lo + 1);
  const int ddy = dy_lo + rng.uniform_int(dy_hi - dy_lo + 1);

  Sample out = a;
  const bool donor_mask =
      donor.masks.size() == donor.labels.size() && !donor.masks.empty();
  for (int y = by1; y <= by2; ++y) {
    for (int x = bx1; x <= bx2; ++x) {
      if (donor_mask && !donor.masks[di].at(y, x)) continue;
      const int ty = y + ddy, tx = x + ddx;
      if (ty < 0 || ty >= h || tx < 0 || tx >= w) continue;
      for (int c = 0; c < 3; ++c)
        out.image.at(c, ty, tx) = donor.image.at(c, y, x);
    }
  }
  Label pasted = dl;
  pasted.cx = dl.cx + double(ddx) / w;
  pasted.cy = dl.cy + double(ddy) / h;
  if (dl.has_center) {
    pasted.pcx = dl.pcx + double(ddx) / w;
    pasted.pcy = dl.pcy + double(ddy) / h;
  }
  out.labels.push_back(pasted);
  if (out.masks.size() == a.labels.size() && !out.masks.empty()) {
    InstanceMask m;
    m.w = w;
    m.h = h;
    m.on.assign(size_t(w) * size_t(h), 0);
    for (int y = by1; y <= by2; ++y) {
      for (int x = bx1; x <= bx2; ++x) {
        if (donor_mask && !donor.masks[di].at(y, x)) continue;
        const int ty = y + ddy, tx = x + ddx;
        if (ty >= 0 && ty < h && tx >= 0 && tx < w) m.set(ty, tx, true);
      }
    }
    out.masks.push_back(m);
  }
  return out;
}

Sample random_erase(const Sample& a, Rng& rng) {
  Sample out = a;
  const int w = a.image.w, h = a.image.h;
  const double frac = rng.uniform(0.02, 0.2);
  const double aspect = rng.uniform(0.3, 3.3);
  int ew = int(std::lround(std::sqrt(frac * w * h / aspect)));
  int eh = int(std::lround(std::sqrt(frac * w * h * aspect)));
  ew = std::max(1, std::min(ew, w));
  eh = std::max(1, std::min(eh, h));
  const int x0 = rng.uniform_int(w - ew + 1);
  const int y0 = rng.uniform_int(h - eh + 1);
  for (int y = y0; y < y0 + eh; ++y)
    for (int x = x0; x < x0 + ew; ++x)
      for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = kFillGray;
  return out;  // labels untouched by design
}

// ===== pipeline =====

Sample augment_sample(const Sample& base, const SampleSource& source,
                      int n_source, const AugConfig& cfg, Rng& rng) {
  validate_aug(cfg);
  const bool needs_donors = cfg.mosaic_p > 0.0 || cfg.copypaste_p > 0.0 ||
                            cfg.mixup_alpha_weight > 0.0;
  if (needs_donors && n_source < 1)
    throw UsageError("augment: donor transforms enabled with no source pool");
  Sample s = base;
  if (cfg.mosaic_p > 0.0 && rng.bernoulli(cfg.mosaic_p)) {
    const int i1 = rng.uniform_int(n_source);
    const int i2 = rng.uniform_int(n_source);
    const int i3 = rng.uniform_int(n_source);
    std::array<Sample, 4> four = {s, source(i1), source(i2), source(i3)};
    s = mosaic(four, rng);
  }
  if (cfg.copypaste_p > 0.0 && rng.bernoulli(cfg.copypaste_p))
    s = copy_paste(s, source(rng.uniform_int(n_source)), rng);
  if (cfg.mixup_alpha_weight > 0.0 && rng.bernoulli(cfg.mixup_alpha_weight)) {
    const double p = cfg.mixup_alpha_weight;
    const double donor_w = rng.beta(32.0, 32.0 * (1.0 - p) / p);  // mean p
    s = mixup(s, source(rng.uniform_int(n_source)), 1.0 - donor_w);
  }
  s.image = hsv_jitter(s.image, cfg, rng);
  if (cfg.flip_p > 0.0 && rng.bernoulli(cfg.flip_p)) s = hflip(s);
  if (cfg.scale_lo != 1.0 || cfg.scale_hi != 1.0)
    s = random_scale(s, cfg.scale_lo, cfg.scale_hi, rng);
  if (cfg.erase_p > 0.0 && rng.bernoulli(cfg.erase_p)) s = random_erase(s, rng);
  return s;
}

}  // namespace ripeloc
