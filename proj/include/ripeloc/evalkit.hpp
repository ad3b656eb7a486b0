#pragma once
// ===== Detection metrics =====
//
// Precision/recall, 101-point interpolated AP and mAP@50:95, normalized
// confusion matrix, and center-point error statistics with the pixel->mm
// projection. Matching is VOC-style greedy: detections in descending score
// order each take the best-IoU unmatched ground truth of their class at or
// above the IoU threshold.
//
// P/R at an operating point are micro-averaged (pooled TP/FP/FN over both
// classes); AP is per-class with absent classes excluded from the mean.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "ripeloc/postprocess.hpp"

namespace ripeloc {

struct GtBox {
  int class_id = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  bool has_center = false;  // ripe annotations carry the picking point
  double cx = 0, cy = 0;
};

// one image's detections with its ground truth
struct EvalScene {
  std::vector<Detection> dets;
  std::vector<GtBox> gts;
};

struct DetMatch {
  bool tp = false;
  int gt_index = -1;  // into the scene's gts, -1 for FP
  double iou = 0.0;
};

struct MatchResult {
  std::vector<DetMatch> det;      // parallel to the input detections
  std::vector<int> gt_matched_by;  // det index per gt, -1 if missed
};

// per-class greedy matching at one IoU threshold (class-agnostic if
// cross_class, used by the confusion matrix)
MatchResult match(const std::vector<Detection>& dets,
                  const std::vector<GtBox>& gts, double iou_thresh,
                  bool cross_class = false);

// 101-point interpolated AP from (score, is_tp) pairs against n_gt positives
double average_precision(std::vector<std::pair<double, bool>> scored,
                         int n_gt);

struct ApReport {
  std::array<double, 2> ap50{};        // per class at IoU 0.5
  std::array<double, 2> ap5095{};      // per class averaged over 0.50..0.95
  std::array<bool, 2> class_present{};  // class had ground truth
  double map50 = 0.0, map5095 = 0.0;   // means over present classes
};
ApReport map_range(const std::vector<EvalScene>& scenes);

struct PrPoint {
  double precision = 0.0, recall = 0.0;
  int tp = 0, fp = 0, fn = 0;
};
// operating-point P/R: detections filtered at conf_thresh, matched at
// iou_thresh, counts pooled over classes (Eq. 2 arithmetic)
PrPoint precision_recall(const std::vector<EvalScene>& scenes,
                         double iou_thresh, double conf_thresh);

struct PrCurvePoint {
  int class_id = 0;
  double recall = 0.0, precision = 0.0;
};
// raw per-class PR sweep at IoU 0.5 (one point per detection, score-ordered)
std::vector<PrCurvePoint> pr_curve(const std::vector<EvalScene>& scenes);

// rows: true unripe, true ripe, background(FP pool); columns: predicted
// unripe, ripe, background(missed). Class rows normalize over gt counts,
// the background row over total false positives; empty rows stay zero.
std::array<std::array<double, 3>, 3> confusion_matrix(
    const std::vector<EvalScene>& scenes, double iou_thresh,
    double conf_thresh);

struct CenterErrorStats {
  double rmse_x = NAN, rmse_y = NAN, rmse_euclidean = NAN;
  double mae = NAN;            // mean Euclidean distance
  double pct_within_5px = NAN;
  int n = 0;                   // zero matches leave the stats undefined (NaN)
};
// direct evaluation over (pred_cx, pred_cy, gt_cx, gt_cy) pairs
CenterErrorStats center_stats_from_pairs(
    const std::vector<std::array<double, 4>>& pairs);
// pairs are TP ripe matches at IoU >= 0.5 whose detection and gt both carry
// centers; detections below conf_thresh are ignored
CenterErrorStats center_stats(const std::vector<EvalScene>& scenes,
                              double conf_thresh);

// physical projection at the working distance (0.78 mm/px at 500 mm)
double px_to_mm(double err_px, double mm_per_px = 0.78);

// full evaluation summary; serialized as the MetricsReport JSON
struct MetricsReport {
  ApReport ap;
  PrPoint pr;               // at conf 0.40 / IoU 0.5
  std::array<std::array<double, 3>, 3> confusion{};  // conf 0.40 / IoU 0.5
  CenterErrorStats centers;  // at conf 0.40
  double mm_per_px = 0.78;
  int n_images = 0, n_gt = 0;
};
MetricsReport evaluate(const std::vector<EvalScene>& scenes,
                       double conf_thresh = kDefaultConfThresh);
std::string metrics_to_json(const MetricsReport& r);

}  // namespace ripeloc
