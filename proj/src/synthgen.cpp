#include "ripeloc/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <utility>

#include "ripeloc/augment.hpp"  // hsv_to_rgb
#include "ripeloc/common.hpp"

namespace ripeloc {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct IllumParams {
  double ambient;
  std::array<double, 3> tint;
  double light_dx, light_dy;  // specular offset, in radii
};

IllumParams illum_params(Illumination il) {
  switch (il) {
    case Illumination::Morning:
      return {0.80, {0.94, 1.00, 1.06}, -0.40, -0.25};
    case Illumination::Afternoon:
      return {0.88, {1.08, 1.00, 0.90}, 0.40, -0.25};
    default:
      return {1.00, {1.00, 1.00, 1.00}, 0.00, -0.45};
  }
}

void put_px(Image& img, int x, int y, const std::array<double, 3>& rgb,
            const IllumParams& ip) {
  for (int c = 0; c < 3; ++c)
    img.at(c, y, x) = clampd(rgb[size_t(c)] * ip.tint[size_t(c)], 0.0, 1.0);
}

// stream-independent per-pixel noise so image size never changes the number
// of rng draws a scene consumes
double hash_noise(uint64_t salt, int x, int y) {
  const uint64_t h =
      splitmix64(salt ^ (uint64_t(uint32_t(x)) << 32 | uint32_t(y)));
  return double(h >> 11) * 0x1.0p-53;  // [0, 1)
}

struct Disk {
  double cx, cy, r;
  int cls;  // 0 unripe, 1 ripe
};

double box_iou(const Label& a, const Label& b) {
  const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2;
  const double ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
  const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2;
  const double by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
  const double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  const double ih = std::min(ay2, by2) - std::max(ay1, by1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

}  // namespace

void validate_spec(const SceneSpec& s) {
  if (s.image_size < 16) throw UsageError("scene spec: image_size < 16");
  if (s.n_ripe_lo < 0 || s.n_ripe_hi < s.n_ripe_lo ||
      s.n_unripe_lo < 0 || s.n_unripe_hi < s.n_unripe_lo)
    throw UsageError("scene spec: bad instance count range");
  if (!(s.radius_lo > 0 && s.radius_lo <= s.radius_hi))
    throw UsageError("scene spec: bad radius range");
  if (!(s.occlusion_p >= 0 && s.occlusion_p <= 1))
    throw UsageError("scene spec: occlusion_p outside [0,1]");
  if (s.clutter_density < 0)
    throw UsageError("scene spec: clutter_density < 0");
  if (s.ripe_share >= 0 && s.ripe_share > 1)
    throw UsageError("scene spec: ripe_share > 1");
}

Sample generate(const SceneSpec& spec, Rng& rng, GenStats* stats) {
  validate_spec(spec);
  const int W = spec.image_size, H = spec.image_size;
  const IllumParams ip = illum_params(spec.illum);

  Sample out;
  out.image = Image::solid(W, H, 0, 0, 0);

  // --- background: dim foliage tone with hash noise ---
  const double bg_h = rng.uniform(100.0, 130.0);
  const double bg_s = rng.uniform(0.35, 0.55);
  const double bg_v = rng.uniform(0.22, 0.34) * ip.ambient;
  const uint64_t noise_salt = rng.bits();
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double n = hash_noise(noise_salt, x, y) - 0.5;
      put_px(out.image, x, y,
             hsv_to_rgb(bg_h, bg_s, clampd(bg_v * (1.0 + 0.25 * n), 0.0, 1.0)),
             ip);
    }
  }

  // --- clutter: leaf ellipses and stem strokes, all behind the fruit ---
  const int n_clutter =
      int(std::lround(spec.clutter_density * double(W) * double(H) / 1000.0));
  for (int k = 0; k < n_clutter; ++k) {
    if (rng.bernoulli(0.7)) {
      // leaf: filled rotated ellipse in the unripe hue band (green-on-green)
      const double cx = rng.uniform(0.0, double(W));
      const double cy = rng.uniform(0.0, double(H));
      const double a = rng.uniform(3.0, 0.18 * W);
      const double b = a * rng.uniform(0.35, 0.7);
      const double th = rng.uniform(0.0, kPi);
      const double h = rng.uniform(90.0, 140.0);
      const double s = rng.uniform(0.4, 0.7);
      const double v = rng.uniform(0.18, 0.42) * ip.ambient;
      const double ct = std::cos(th), st = std::sin(th);
      const int x0 = std::max(0, int(std::floor(cx - a)));
      const int x1 = std::min(W - 1, int(std::ceil(cx + a)));
      const int y0 = std::max(0, int(std::floor(cy - a)));
      const int y1 = std::min(H - 1, int(std::ceil(cy + a)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double u = (dx * ct + dy * st) / a;
          const double w = (-dx * st + dy * ct) / b;
          if (u * u + w * w <= 1.0)
            put_px(out.image, x, y, hsv_to_rgb(h, s, v), ip);
        }
      }
    } else {
      // stem: capsule stroke in a woody green-brown band
      const double px = rng.uniform(0.0, double(W));
      const double py = rng.uniform(0.0, double(H));
      const double ang = rng.uniform(0.0, kPi);
      const double len = rng.uniform(0.15, 0.45) * W;
      const double half_t = rng.uniform(0.5, 1.2);
      const double h = rng.uniform(70.0, 110.0);
      const double s = rng.uniform(0.3, 0.6);
      const double v = rng.uniform(0.15, 0.35) * ip.ambient;
      const double ex = px + len * std::cos(ang), ey = py + len * std::sin(ang);
      const int x0 = std::max(0, int(std::floor(std::min(px, ex) - half_t)));
      const int x1 = std::min(W - 1, int(std::ceil(std::max(px, ex) + half_t)));
      const int y0 = std::max(0, int(std::floor(std::min(py, ey) - half_t)));
      const int y1 = std::min(H - 1, int(std::ceil(std::max(py, ey) + half_t)));
      const double L2 = len * len;
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double qx = x + 0.5 - px, qy = y + 0.5 - py;
          const double t = L2 == 0 ? 0.0
                                   : clampd((qx * (ex - px) + qy * (ey - py)) / L2,
                                            0.0, 1.0);
          const double ddx = qx - t * (ex - px), ddy = qy - t * (ey - py);
          if (ddx * ddx + ddy * ddy <= half_t * half_t)
            put_px(out.image, x, y, hsv_to_rgb(h, s, v), ip);
        }
      }
    }
  }

  // --- fruit counts and classes ---
  const int nr = spec.n_ripe_lo + rng.uniform_int(spec.n_ripe_hi - spec.n_ripe_lo + 1);
  const int nu =
      spec.n_unripe_lo + rng.uniform_int(spec.n_unripe_hi - spec.n_unripe_lo + 1);
  const int total = nr + nu;
  std::vector<int> classes;
  if (spec.ripe_share >= 0.0) {
    for (int i = 0; i < total; ++i)
      classes.push_back(rng.bernoulli(spec.ripe_share) ? 1 : 0);
  } else {
    classes.assign(size_t(nr), 1);
    classes.insert(classes.end(), size_t(nu), 0);
    rng.shuffle(classes);  // z-order must not correlate with class
  }
  if (stats) stats->requested = total;

  // --- placement with rejection ---
  std::vector<Disk> disks;
  for (int cls : classes) {
    const double r = rng.uniform(spec.radius_lo, spec.radius_hi);
    const bool overlap_ok = !disks.empty() && rng.bernoulli(spec.occlusion_p);
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      double cx, cy;
      if (overlap_ok) {
        // deliberately lean on an earlier fruit for partial occlusion
        const Disk& host = disks[size_t(rng.uniform_int(int(disks.size())))];
        const double d = (r + host.r) * rng.uniform(0.45, 0.85);
        const double phi = rng.uniform(0.0, 2.0 * kPi);
        cx = host.cx + d * std::cos(phi);
        cy = host.cy + d * std::sin(phi);
        if (cx < 0 || cx >= W || cy < 0 || cy >= H) {
          if (stats) ++stats->rejected_attempts;
          continue;
        }
      } else {
        cx = rng.uniform(0.0, double(W));
        cy = rng.uniform(0.0, double(H));
        bool clear = true;
        for (const Disk& o : disks) {
          const double dx = cx - o.cx, dy = cy - o.cy;
          if (std::sqrt(dx * dx + dy * dy) < (r + o.r) * 1.02) {
            clear = false;
            break;
          }
        }
        if (!clear) {
          if (stats) ++stats->rejected_attempts;
          continue;
        }
      }
      disks.push_back({cx, cy, r, cls});
      placed = true;
    }
    // 100 rejections: infeasible packing, carry on with fewer fruit
  }
  if (stats) stats->placed = int(disks.size());

  // --- render in placement order; the owner map records the topmost disk ---
  std::vector<int> owner(size_t(W) * size_t(H), -1);
  for (size_t i = 0; i < disks.size(); ++i) {
    const Disk& d = disks[i];
    const double h = d.cls == 1
                         ? std::fmod(345.0 + rng.uniform(0.0, 30.0), 360.0)
                         : rng.uniform(90.0, 140.0);
    const double s = d.cls == 1 ? rng.uniform(0.70, 0.95) : rng.uniform(0.55, 0.85);
    const double v_base = rng.uniform(0.55, 0.80);
    const double hx = d.cx + d.r * ip.light_dx;
    const double hy = d.cy + d.r * ip.light_dy;
    const double sig2 = 2.0 * (0.3 * d.r) * (0.3 * d.r);
    const int x0 = std::max(0, int(std::floor(d.cx - d.r)));
    const int x1 = std::min(W - 1, int(std::ceil(d.cx + d.r)));
    const int y0 = std::max(0, int(std::floor(d.cy - d.r)));
    const int y1 = std::min(H - 1, int(std::ceil(d.cy + d.r)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - d.cx, dy = y + 0.5 - d.cy;
        const double d2 = dx * dx + dy * dy;
        if (d2 > d.r * d.r) continue;
        const double dn2 = d2 / (d.r * d.r);
        const double gx = x + 0.5 - hx, gy = y + 0.5 - hy;
        const double g = std::exp(-(gx * gx + gy * gy) / sig2);
        const double v =
            clampd(v_base * ip.ambient * (1.0 - 0.45 * dn2) + 0.35 * g, 0.0, 1.0);
        const double sp = clampd(s * (1.0 - 0.5 * g), 0.0, 1.0);
        put_px(out.image, x, y, hsv_to_rgb(h, sp, v), ip);
        owner[size_t(y) * size_t(W) + size_t(x)] = int(i);
      }
    }
  }

  // --- annotations from the owner map: tight boxes, exact centers ---
  for (size_t i = 0; i < disks.size(); ++i) {
    int mnx = W, mxx = -1, mny = H, mxy = -1;
    InstanceMask m;
    m.w = W;
    m.h = H;
    m.on.assign(size_t(W) * size_t(H), 0);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        if (owner[size_t(y) * size_t(W) + size_t(x)] != int(i)) continue;
        m.set(y, x, true);
        mnx = std::min(mnx, x);
        mxx = std::max(mxx, x);
        mny = std::min(mny, y);
        mxy = std::max(mxy, y);
      }
    }
    if (mxx < 0) continue;  // fully occluded or fully out of frame
    Label l;
    l.class_id = disks[i].cls;
    const double x1 = double(mnx) / W, x2 = double(mxx + 1) / W;
    const double y1 = double(mny) / H, y2 = double(mxy + 1) / H;
    l.cx = (x1 + x2) / 2;
    l.cy = (y1 + y2) / 2;
    l.w = x2 - x1;
    l.h = y2 - y1;
    if (disks[i].cls == 1) {
      // the picking point is the true disk center; occlusion can push it
      // past the visible box, in which case it clamps to the box edge
      l.has_center = true;
      l.pcx = clampd(disks[i].cx / W, x1, x2);
      l.pcy = clampd(disks[i].cy / H, y1, y2);
    }
    out.labels.push_back(l);
    out.masks.push_back(std::move(m));
  }
  return out;
}

int difficulty_bucket(const Sample& sample) {
  const int n = int(sample.labels.size());
  bool occluded = false;
  for (size_t i = 0; i < sample.labels.size() && !occluded; ++i)
    for (size_t j = i + 1; j < sample.labels.size(); ++j)
      if (box_iou(sample.labels[i], sample.labels[j]) > 0.05) {
        occluded = true;
        break;
      }
  if (n >= 6 || (occluded && n >= 4)) return 2;
  if (n >= 4 || occluded) return 1;
  return 0;
}

Splits make_splits(const std::vector<int>& difficulty,
                   const std::array<double, 3>& ratios, Rng& rng) {
  double sum = 0;
  for (double r : ratios) {
    if (r < 0) throw UsageError("make_splits: negative ratio");
    sum += r;
  }
  if (std::fabs(sum - 1.0) > 1e-9)
    throw UsageError("make_splits: ratios must sum to 1");

  std::map<int, std::vector<int>> buckets;
  for (size_t i = 0; i < difficulty.size(); ++i)
    buckets[difficulty[i]].push_back(int(i));

  Splits out;
  std::array<std::vector<int>*, 3> dest = {&out.train, &out.val, &out.test};
  for (auto& [bucket, members] : buckets) {
    (void)bucket;
    rng.shuffle(members);
    const int n = int(members.size());
    std::array<int, 3> take;
    std::array<double, 3> frac;
    int used = 0;
    for (int s = 0; s < 3; ++s) {
      const double q = ratios[size_t(s)] * n;
      take[size_t(s)] = int(std::floor(q));
      frac[size_t(s)] = q - std::floor(q);
      used += take[size_t(s)];
    }
    // largest remainder; ties favor train, then val, then test
    std::array<int, 3> order = {0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&frac](int a, int b) { return frac[size_t(a)] > frac[size_t(b)]; });
    for (int leftover = n - used, k = 0; leftover > 0; --leftover, ++k)
      ++take[size_t(order[size_t(k % 3)])];
    int pos = 0;
    for (int s = 0; s < 3; ++s)
      for (int k = 0; k < take[size_t(s)]; ++k)
        dest[size_t(s)]->push_back(members[size_t(pos++)]);
  }
  for (auto* v : dest) std::sort(v->begin(), v->end());
  return out;
}

// ===== dataset writer =====

namespace fs = std::filesystem;

namespace {

std::string stem_of(int index) {
  std::ostringstream os;
  os.width(6);
  os.fill('0');
  os << index;
  return os.str();
}

SceneSpec preset_spec(const std::string& preset, int image_size, Rng& rng) {
  SceneSpec spec;
  spec.image_size = image_size;
  if (preset == "standard") {
    // midday-weighted illumination, published ripe share
    spec.ripe_share = 0.573;
    const double u = rng.uniform();
    spec.illum = u < 0.5 ? Illumination::Midday
                         : (u < 0.75 ? Illumination::Morning
                                     : Illumination::Afternoon);
  } else if (preset == "pretask") {
    // the backbone pre-task: denser scenes, uniform illumination mix
    spec.ripe_share = 0.5;
    spec.n_ripe_lo = 2;
    spec.n_ripe_hi = 5;
    spec.n_unripe_lo = 1;
    spec.n_unripe_hi = 4;
    spec.clutter_density = 2.0;
    spec.occlusion_p = 0.35;
    spec.illum = Illumination(rng.uniform_int(3));
  } else {
    throw UsageError("unknown dataset preset '" + preset + "'");
  }
  return spec;
}

}  // namespace

DatasetSummary write_dataset(const DatasetConfig& cfg) {
  if (cfg.root.empty()) throw UsageError("dataset root is empty");
  if (cfg.n_images < 1) throw UsageError("dataset needs n_images >= 1");
  if (cfg.image_size < 32 || cfg.image_size % 32 != 0)
    throw UsageError("dataset image_size must be a positive multiple of 32");

  const fs::path root(cfg.root);
  const fs::path stage = root / "_stage";
  fs::create_directories(stage);

  DatasetSummary sum;
  std::vector<int> difficulty;
  for (int i = 0; i < cfg.n_images; ++i) {
    Rng rng = Rng::for_sample(cfg.seed, 0, uint64_t(i));
    const SceneSpec spec = preset_spec(cfg.preset, cfg.image_size, rng);
    GenStats stats;
    Sample sample = generate(spec, rng, &stats);
    if (stats.placed < stats.requested) ++sum.packing_shortfalls;
    for (const Label& l : sample.labels)
      (l.class_id == 1 ? sum.n_ripe : sum.n_unripe) += 1;
    difficulty.push_back(difficulty_bucket(sample));
    const std::string stem = stem_of(i);
    write_ppm((stage / (stem + ".ppm")).string(), sample.image);
    write_labels((stage / (stem + ".txt")).string(), sample.labels);
  }

  Rng split_rng(splitmix64(cfg.seed ^ 0xA0761D6478BD642FULL));
  Splits splits = make_splits(difficulty, cfg.ratios, split_rng);
  const std::array<std::pair<const char*, const std::vector<int>*>, 3> parts = {
      {{"train", &splits.train}, {"val", &splits.val}, {"test", &splits.test}}};
  for (const auto& [name, members] : parts) {
    const fs::path dir = root / name;
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "labels");
    std::ofstream manifest(dir / "manifest.txt");
    for (int idx : *members) {
      const std::string stem = stem_of(idx);
      fs::rename(stage / (stem + ".ppm"), dir / "images" / (stem + ".ppm"));
      fs::rename(stage / (stem + ".txt"), dir / "labels" / (stem + ".txt"));
      manifest << stem << "\n";
    }
  }
  fs::remove_all(stage);
  sum.n_train = int(splits.train.size());
  sum.n_val = int(splits.val.size());
  sum.n_test = int(splits.test.size());
  return sum;
}

}  // namespace ripeloc
