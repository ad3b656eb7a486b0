// ===== Postprocessing =====

#include "ripeloc/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "ripeloc/common.hpp"

namespace ripeloc {

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// sigmoid of the ripe-class logit at (i,j), edge-replicated
double ripe_score_at(const Tensor& cls, int n, int i, int j) {
  const int s = cls.dim(2);
  i = std::clamp(i, 0, s - 1);
  j = std::clamp(j, 0, s - 1);
  const int c = 1;  // ripe
  return sigmoid(cls.data()[((int64_t(n) * cls.dim(1) + c) * s + i) * s + j]);
}

}  // namespace

double box_iou(const Detection& a, const Detection& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni =
      (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<Detection> decode(const HeadOutputs& heads, int n,
                              double conf_thresh) {
  if (conf_thresh <= 0 || conf_thresh >= 1)
    throw UsageError("conf_thresh must be in (0,1), got " +
                     std::to_string(conf_thresh));
  std::vector<Detection> out;
  for (int sc = 0; sc < 3; ++sc) {
    const Tensor& cls = heads.cls[sc];
    const Tensor& box = heads.box[sc];
    if (n < 0 || n >= cls.dim(0))
      throw ShapeError("decode: image index " + std::to_string(n) +
                       " outside batch of " + std::to_string(cls.dim(0)));
    const int classes = cls.dim(1), s = cls.dim(2);
    const int bins = box.dim(1) / 4;
    const double stride = heads.strides[size_t(sc)];
    const double extent = s * stride;
    std::vector<double> p(static_cast<size_t>(bins));
    for (int i = 0; i < s; ++i) {
      for (int j = 0; j < s; ++j) {
        bool any = false;
        for (int c = 0; c < classes && !any; ++c)
          any = sigmoid(cls.data()[((int64_t(n) * classes + c) * s + i) * s +
                                   j]) >= conf_thresh;
        if (!any) continue;

        // DFL expectation per side, in stride units
        double dist[4];
        for (int side = 0; side < 4; ++side) {
          double mx = -1e300;
          for (int k = 0; k < bins; ++k)
            mx = std::max(
                mx, box.data()[((int64_t(n) * 4 * bins + side * bins + k) * s +
                                i) *
                                   s +
                               j]);
          double z = 0;
          for (int k = 0; k < bins; ++k) {
            p[size_t(k)] = std::exp(
                box.data()[((int64_t(n) * 4 * bins + side * bins + k) * s + i) *
                               s +
                           j] -
                mx);
            z += p[size_t(k)];
          }
          double e = 0;
          for (int k = 0; k < bins; ++k) e += k * p[size_t(k)];
          dist[side] = e / z;
        }
        const double cx = (j + 0.5) * stride, cy = (i + 0.5) * stride;
        Detection d;
        d.x1 = clampd(cx - dist[0] * stride, 0.0, extent);
        d.y1 = clampd(cy - dist[1] * stride, 0.0, extent);
        d.x2 = clampd(cx + dist[2] * stride, 0.0, extent);
        d.y2 = clampd(cy + dist[3] * stride, 0.0, extent);
        if (!(d.x1 < d.x2 && d.y1 < d.y2)) continue;  // clipped away
        d.src_scale = sc;
        d.src_i = i;
        d.src_j = j;
        for (int c = 0; c < classes; ++c) {
          const double sc_score = sigmoid(
              cls.data()[((int64_t(n) * classes + c) * s + i) * s + j]);
          if (sc_score < conf_thresh) continue;
          d.class_id = c;
          d.score = sc_score;
          out.push_back(d);
        }
      }
    }
  }
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& dets,
                           double iou_thresh) {
  if (iou_thresh <= 0 || iou_thresh >= 1)
    throw UsageError("iou_thresh must be in (0,1), got " +
                     std::to_string(iou_thresh));
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return a < b;  // tie-break: lower input index first
  });
  std::vector<Detection> kept;
  for (size_t idx : order) {
    const Detection& d = dets[idx];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id != d.class_id) continue;
      if (box_iou(k, d) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::array<double, 2> gaussian_refine(
    const std::array<std::array<double, 3>, 3>& window,
    std::array<bool, 2>* degenerate) {
  double w[3][3];
  double mn = window[0][0];
  for (const auto& row : window)
    for (double v : row) mn = std::min(mn, v);
  const double shift = mn <= 0 ? 1e-6 - mn : 0.0;  // logs need positive input
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      w[i][j] = std::log(window[size_t(i)][size_t(j)] + shift);

  if (degenerate) *degenerate = {false, false};
  auto fit = [&](double lo, double c, double hi, int axis) {
    const double denom = 2.0 * c - lo - hi;  // parabola-vertex curvature
    if (std::abs(denom) <= 1e-12) {
      if (degenerate) (*degenerate)[size_t(axis)] = true;
      return 0.0;
    }
    return clampd(0.5 * (hi - lo) / denom, -0.5, 0.5);
  };
  return {fit(w[1][0], w[1][1], w[1][2], 0), fit(w[0][1], w[1][1], w[2][1], 1)};
}

void route_and_localize(std::vector<Detection>& dets,
                        const HeadOutputs& heads, int n) {
  for (Detection& d : dets) {
    if (d.class_id != 1) {
      d.has_center = false;
      continue;
    }
    const double gx = 0.5 * (d.x1 + d.x2), gy = 0.5 * (d.y1 + d.y2);
    double cx = gx, cy = gy;
    if (d.src_scale >= 0 && heads.cls[size_t(d.src_scale)].dim(1) > 1) {
      const Tensor& cls = heads.cls[size_t(d.src_scale)];
      const double stride = heads.strides[size_t(d.src_scale)];
      const int s = cls.dim(2);
      // hill-climb to a local argmax of the score map, staying inside the box
      int ci = d.src_i, cj = d.src_j;
      for (int step = 0; step < 2 * s; ++step) {
        double best = ripe_score_at(cls, n, ci, cj);
        int bi = ci, bj = cj;
        for (int di = -1; di <= 1; ++di) {
          for (int dj = -1; dj <= 1; ++dj) {
            const int ni = ci + di, nj = cj + dj;
            if (ni < 0 || nj < 0 || ni >= s || nj >= s) continue;
            const double px = (nj + 0.5) * stride, py = (ni + 0.5) * stride;
            if (px < d.x1 || px > d.x2 || py < d.y1 || py > d.y2) continue;
            const double v = ripe_score_at(cls, n, ni, nj);
            if (v > best) {
              best = v;
              bi = ni;
              bj = nj;
            }
          }
        }
        if (bi == ci && bj == cj) break;
        ci = bi;
        cj = bj;
      }
      std::array<std::array<double, 3>, 3> win;
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj)
          win[size_t(di + 1)][size_t(dj + 1)] =
              ripe_score_at(cls, n, ci + di, cj + dj);
      std::array<bool, 2> degen{};
      const auto off = gaussian_refine(win, &degen);
      // informative axes take the sub-pixel score peak; degenerate axes keep
      // the midpoint initialization
      if (!degen[0]) cx = (cj + 0.5 + off[0]) * stride;
      if (!degen[1]) cy = (ci + 0.5 + off[1]) * stride;
    }
    d.cx = clampd(cx, d.x1, d.x2);
    d.cy = clampd(cy, d.y1, d.y2);
    d.has_center = true;
  }
}

std::vector<Detection> postprocess_image(const HeadOutputs& heads, int n,
                                         double conf_thresh,
                                         double iou_thresh) {
  std::vector<Detection> dets = nms(decode(heads, n, conf_thresh), iou_thresh);
  route_and_localize(dets, heads, n);
  return dets;
}

void write_detections(std::ostream& os, const std::string& image_id,
                      const std::vector<Detection>& dets) {
  if (image_id.find_first_of(" \t\n") != std::string::npos)
    throw DataError("detection io: image id '" + image_id +
                    "' contains whitespace");
  os << std::setprecision(17);
  for (const Detection& d : dets) {
    os << image_id << ' ' << d.class_id << ' ' << d.score << ' ' << d.x1
       << ' ' << d.y1 << ' ' << d.x2 << ' ' << d.y2;
    if (d.has_center) os << ' ' << d.cx << ' ' << d.cy;
    os << '\n';
  }
}

std::vector<std::pair<std::string, Detection>> read_detections(
    std::istream& is) {
  std::vector<std::pair<std::string, Detection>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id;
    Detection d;
    ls >> id >> d.class_id >> d.score >> d.x1 >> d.y1 >> d.x2 >> d.y2;
    if (!ls)
      throw DataError("detection io: malformed line " +
                      std::to_string(lineno) + ": '" + line + "'");
    if (ls >> d.cx) {
      if (!(ls >> d.cy))
        throw DataError("detection io: line " + std::to_string(lineno) +
                        " has a center x but no center y");
      d.has_center = true;
    }
    std::string extra;
    if (ls >> extra)
      throw DataError("detection io: line " + std::to_string(lineno) +
                      " has trailing fields");
    if (d.class_id < 0 || !(d.x1 < d.x2) || !(d.y1 < d.y2) ||
        !std::isfinite(d.score))
      throw DataError("detection io: line " + std::to_string(lineno) +
                      " violates detection invariants");
    out.emplace_back(id, d);
  }
  return out;
}

}  // namespace ripeloc
