// ===== Detection metrics =====

#include "ripeloc/evalkit.hpp"

#include <algorithm>
#include <numeric>

#include "json.hpp"
#include "ripeloc/common.hpp"

namespace ripeloc {

namespace {

double iou_dg(const Detection& d, const GtBox& g) {
  const double ix = std::max(0.0, std::min(d.x2, g.x2) - std::max(d.x1, g.x1));
  const double iy = std::max(0.0, std::min(d.y2, g.y2) - std::max(d.y1, g.y1));
  const double inter = ix * iy;
  const double uni =
      (d.x2 - d.x1) * (d.y2 - d.y1) + (g.x2 - g.x1) * (g.y2 - g.y1) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<size_t> score_order(const std::vector<Detection>& dets) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return dets[a].score > dets[b].score;
  });
  return order;
}

}  // namespace

MatchResult match(const std::vector<Detection>& dets,
                  const std::vector<GtBox>& gts, double iou_thresh,
                  bool cross_class) {
  MatchResult r;
  r.det.resize(dets.size());
  r.gt_matched_by.assign(gts.size(), -1);
  for (size_t di : score_order(dets)) {
    const Detection& d = dets[di];
    int best_gt = -1;
    double best_iou = 0.0;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (r.gt_matched_by[gi] != -1) continue;
      if (!cross_class && gts[gi].class_id != d.class_id) continue;
      const double v = iou_dg(d, gts[gi]);
      if (v >= iou_thresh && v > best_iou) {
        best_iou = v;
        best_gt = int(gi);
      }
    }
    if (best_gt >= 0) {
      r.det[di] = {true, best_gt, best_iou};
      r.gt_matched_by[size_t(best_gt)] = int(di);
    }
  }
  return r;
}

double average_precision(std::vector<std::pair<double, bool>> scored,
                         int n_gt) {
  if (n_gt <= 0) return 0.0;
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  const size_t n = scored.size();
  std::vector<double> recall(n), prec(n);
  int tp = 0;
  for (size_t i = 0; i < n; ++i) {
    tp += scored[i].second ? 1 : 0;
    recall[i] = double(tp) / n_gt;
    prec[i] = double(tp) / double(i + 1);
  }
  // precision envelope: non-increasing from the right
  for (size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  // 101-point interpolation over recall 0.00 .. 1.00
  double ap = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) ap += prec[size_t(it - recall.begin())];
  }
  return ap / 101.0;
}

ApReport map_range(const std::vector<EvalScene>& scenes) {
  ApReport rep;
  std::array<int, 2> n_gt{};
  for (const EvalScene& s : scenes)
    for (const GtBox& g : s.gts)
      if (g.class_id == 0 || g.class_id == 1) ++n_gt[size_t(g.class_id)];
  rep.class_present = {n_gt[0] > 0, n_gt[1] > 0};

  for (int ti = 0; ti < 10; ++ti) {
    const double thresh = 0.50 + 0.05 * ti;
    std::array<std::vector<std::pair<double, bool>>, 2> scored;
    for (const EvalScene& s : scenes) {
      const MatchResult m = match(s.dets, s.gts, thresh);
      for (size_t i = 0; i < s.dets.size(); ++i) {
        const int c = s.dets[i].class_id;
        if (c == 0 || c == 1)
          scored[size_t(c)].emplace_back(s.dets[i].score, m.det[i].tp);
      }
    }
    for (int c = 0; c < 2; ++c) {
      const double ap = average_precision(scored[size_t(c)], n_gt[size_t(c)]);
      rep.ap5095[size_t(c)] += ap / 10.0;
      if (ti == 0) rep.ap50[size_t(c)] = ap;
    }
  }
  int present = 0;
  for (int c = 0; c < 2; ++c) {
    if (!rep.class_present[size_t(c)]) continue;
    ++present;
    rep.map50 += rep.ap50[size_t(c)];
    rep.map5095 += rep.ap5095[size_t(c)];
  }
  if (present > 0) {
    rep.map50 /= present;
    rep.map5095 /= present;
  }
  return rep;
}

PrPoint precision_recall(const std::vector<EvalScene>& scenes,
                         double iou_thresh, double conf_thresh) {
  PrPoint p;
  int n_gt = 0;
  for (const EvalScene& s : scenes) {
    std::vector<Detection> kept;
    for (const Detection& d : s.dets)
      if (d.score >= conf_thresh) kept.push_back(d);
    const MatchResult m = match(kept, s.gts, iou_thresh);
    for (const DetMatch& dm : m.det) (dm.tp ? p.tp : p.fp) += 1;
    n_gt += int(s.gts.size());
  }
  p.fn = n_gt - p.tp;
  p.precision = p.tp + p.fp > 0 ? double(p.tp) / (p.tp + p.fp) : 0.0;
  p.recall = p.tp + p.fn > 0 ? double(p.tp) / (p.tp + p.fn) : 0.0;
  return p;
}

std::vector<PrCurvePoint> pr_curve(const std::vector<EvalScene>& scenes) {
  std::vector<PrCurvePoint> out;
  std::array<int, 2> n_gt{};
  std::array<std::vector<std::pair<double, bool>>, 2> scored;
  for (const EvalScene& s : scenes) {
    const MatchResult m = match(s.dets, s.gts, 0.5);
    for (size_t i = 0; i < s.dets.size(); ++i) {
      const int c = s.dets[i].class_id;
      if (c == 0 || c == 1)
        scored[size_t(c)].emplace_back(s.dets[i].score, m.det[i].tp);
    }
    for (const GtBox& g : s.gts)
      if (g.class_id == 0 || g.class_id == 1) ++n_gt[size_t(g.class_id)];
  }
  for (int c = 0; c < 2; ++c) {
    if (n_gt[size_t(c)] == 0) continue;
    auto& sc = scored[size_t(c)];
    std::stable_sort(sc.begin(), sc.end(), [](const auto& a, const auto& b) {
      return a.first > b.first;
    });
    int tp = 0;
    for (size_t i = 0; i < sc.size(); ++i) {
      tp += sc[i].second ? 1 : 0;
      out.push_back({c, double(tp) / n_gt[size_t(c)],
                     double(tp) / double(i + 1)});
    }
  }
  return out;
}

std::array<std::array<double, 3>, 3> confusion_matrix(
    const std::vector<EvalScene>& scenes, double iou_thresh,
    double conf_thresh) {
  double counts[3][3] = {};
  for (const EvalScene& s : scenes) {
    std::vector<Detection> kept;
    for (const Detection& d : s.dets)
      if (d.score >= conf_thresh) kept.push_back(d);
    const MatchResult m = match(kept, s.gts, iou_thresh, /*cross_class=*/true);
    for (size_t i = 0; i < kept.size(); ++i) {
      const int col = kept[i].class_id == 1 ? 1 : 0;
      if (m.det[i].tp) {
        const int row = s.gts[size_t(m.det[i].gt_index)].class_id == 1 ? 1 : 0;
        counts[row][col] += 1;
      } else {
        counts[2][col] += 1;  // background row: false-positive pool
      }
    }
    for (size_t g = 0; g < s.gts.size(); ++g)
      if (m.gt_matched_by[g] == -1)
        counts[s.gts[g].class_id == 1 ? 1 : 0][2] += 1;  // missed
  }
  std::array<std::array<double, 3>, 3> out{};
  for (int r = 0; r < 3; ++r) {
    const double sum = counts[r][0] + counts[r][1] + counts[r][2];
    for (int c = 0; c < 3; ++c)
      out[size_t(r)][size_t(c)] = sum > 0 ? counts[r][c] / sum : 0.0;
  }
  return out;
}

CenterErrorStats center_stats_from_pairs(
    const std::vector<std::array<double, 4>>& pairs) {
  CenterErrorStats s;
  s.n = int(pairs.size());
  if (s.n == 0) return s;  // undefined, not zero
  double sx = 0, sy = 0, se = 0, sd = 0;
  int within = 0;
  for (const auto& p : pairs) {
    const double dx = p[0] - p[2], dy = p[1] - p[3];
    sx += dx * dx;
    sy += dy * dy;
    se += dx * dx + dy * dy;
    const double dist = std::sqrt(dx * dx + dy * dy);
    sd += dist;
    if (dist <= 5.0) ++within;
  }
  s.rmse_x = std::sqrt(sx / s.n);
  s.rmse_y = std::sqrt(sy / s.n);
  s.rmse_euclidean = std::sqrt(se / s.n);
  s.mae = sd / s.n;
  s.pct_within_5px = 100.0 * within / s.n;
  return s;
}

CenterErrorStats center_stats(const std::vector<EvalScene>& scenes,
                              double conf_thresh) {
  std::vector<std::array<double, 4>> pairs;
  for (const EvalScene& s : scenes) {
    std::vector<Detection> kept;
    for (const Detection& d : s.dets)
      if (d.score >= conf_thresh) kept.push_back(d);
    const MatchResult m = match(kept, s.gts, 0.5);
    for (size_t i = 0; i < kept.size(); ++i) {
      if (!m.det[i].tp || kept[i].class_id != 1 || !kept[i].has_center)
        continue;
      const GtBox& g = s.gts[size_t(m.det[i].gt_index)];
      if (!g.has_center) continue;
      pairs.push_back({kept[i].cx, kept[i].cy, g.cx, g.cy});
    }
  }
  return center_stats_from_pairs(pairs);
}

double px_to_mm(double err_px, double mm_per_px) {
  if (mm_per_px <= 0)
    throw UsageError("mm_per_px must be positive, got " +
                     std::to_string(mm_per_px));
  return err_px * mm_per_px;
}

MetricsReport evaluate(const std::vector<EvalScene>& scenes,
                       double conf_thresh) {
  MetricsReport r;
  r.ap = map_range(scenes);
  r.pr = precision_recall(scenes, 0.5, conf_thresh);
  r.confusion = confusion_matrix(scenes, 0.5, conf_thresh);
  r.centers = center_stats(scenes, conf_thresh);
  r.n_images = int(scenes.size());
  for (const EvalScene& s : scenes) r.n_gt += int(s.gts.size());
  return r;
}

std::string metrics_to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["map50"] = r.ap.map50;
  j["map5095"] = r.ap.map5095;
  j["ap50"] = {{"unripe", r.ap.ap50[0]}, {"ripe", r.ap.ap50[1]}};
  j["ap5095"] = {{"unripe", r.ap.ap5095[0]}, {"ripe", r.ap.ap5095[1]}};
  j["class_present"] = {{"unripe", r.ap.class_present[0]},
                        {"ripe", r.ap.class_present[1]}};
  j["precision"] = r.pr.precision;
  j["recall"] = r.pr.recall;
  j["tp"] = r.pr.tp;
  j["fp"] = r.pr.fp;
  j["fn"] = r.pr.fn;
  j["confusion_labels"] = {"unripe", "ripe", "background"};
  j["confusion"] = r.confusion;
  nlohmann::ordered_json c;
  c["n"] = r.centers.n;
  c["rmse_x_px"] = r.centers.rmse_x;
  c["rmse_y_px"] = r.centers.rmse_y;
  c["rmse_euclidean_px"] = r.centers.rmse_euclidean;
  c["mae_px"] = r.centers.mae;
  c["pct_within_5px"] = r.centers.pct_within_5px;
  c["rmse_euclidean_mm"] = r.centers.n > 0
                               ? px_to_mm(r.centers.rmse_euclidean, r.mm_per_px)
                               : NAN;
  c["mae_mm"] = r.centers.n > 0 ? px_to_mm(r.centers.mae, r.mm_per_px) : NAN;
  j["centers"] = c;
  j["mm_per_px"] = r.mm_per_px;
  j["n_images"] = r.n_images;
  j["n_gt"] = r.n_gt;
  return j.dump(2) + "\n";
}

}  // namespace ripeloc
