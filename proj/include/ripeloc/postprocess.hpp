#pragma once
// ===== Postprocessing: decode, NMS, routing, sub-pixel center refinement =====
//
// Raw head maps -> final detections. Everything here is plain double
// arithmetic on tensor storage; nothing touches the autodiff tape.
//
// Regression channel layout (shared with the loss module): box maps carry
// 4*B channels per cell, side-major — channel side*B + k holds the logit of
// bin k for side `side`, sides ordered (l, t, r, b) as distances from the
// cell center in stride units.
//
// Center refinement reads the ripe-class sigmoid score map (the only dense
// per-scale confidence surface after the head); windows that touch the map
// border are padded by edge replication.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ripeloc/model.hpp"

namespace ripeloc {

struct Detection {
  int class_id = 0;      // 0 unripe, 1 ripe
  double score = 0.0;    // sigmoid confidence in [0,1]
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // input-pixel corners, x1<x2, y1<y2
  bool has_center = false;                // true iff class_id == 1, post-CPL
  double cx = 0, cy = 0;                  // picking point, inside the box
  // provenance for CPL window lookup (not serialized)
  int src_scale = -1, src_i = -1, src_j = -1;
};

double box_iou(const Detection& a, const Detection& b);

// Anchor-free decode for image `n` of the batch: per cell and class, score =
// sigmoid(logit); cells below conf_thresh dropped; per-side distances are
// DFL softmax expectations in stride units; boxes clipped to the image.
std::vector<Detection> decode(const HeadOutputs& heads, int n,
                              double conf_thresh);

// Per-class greedy NMS: descending score (ties: lower input index first),
// suppress IoU > iou_thresh against any kept same-class box. Returns
// survivors in selection order. Matches the all-pairs reference exactly.
std::vector<Detection> nms(const std::vector<Detection>& dets,
                           double iou_thresh);

// Log-parabola (1-D Gaussian) fit per axis on a 3x3 window centered on the
// peak cell; returns (dx, dy) in cell units, clamped to [-0.5, 0.5].
// Non-positive windows are shifted up to min 1e-6 before the log; a
// degenerate curvature (|denom| <= 1e-12) yields offset 0 and, when
// `degenerate` is given, flags that axis. Exact on noiseless sampled
// Gaussians.
std::array<double, 2> gaussian_refine(
    const std::array<std::array<double, 3>, 3>& window,
    std::array<bool, 2>* degenerate = nullptr);

// Class-specific routing: unripe detections keep no center. Ripe detections
// initialize their center at the box midpoint, hill-climb the ripe score map
// from the source cell to a local 3x3 argmax (staying inside the box), and
// per axis replace the coordinate with the window's sub-pixel peak; an axis
// whose fit is degenerate (e.g. a flat window) keeps the initialized
// midpoint coordinate. The result is clamped into the box. Detections
// without decode provenance keep their midpoint center.
void route_and_localize(std::vector<Detection>& dets,
                        const HeadOutputs& heads, int n);

// decode -> nms -> route_and_localize for one image.
std::vector<Detection> postprocess_image(const HeadOutputs& heads, int n,
                                         double conf_thresh,
                                         double iou_thresh);

constexpr double kDefaultConfThresh = 0.40;  // deployment confidence
constexpr double kDefaultIouThresh = 0.45;   // NMS overlap

// --- detection text format (shared with evalkit and the CLI) ---
// one line per detection: image_id class score x1 y1 x2 y2 [cx cy]
void write_detections(std::ostream& os, const std::string& image_id,
                      const std::vector<Detection>& dets);
// parses the whole stream; returns (image_id, detection) rows in file order
std::vector<std::pair<std::string, Detection>> read_detections(
    std::istream& is);

}  // namespace ripeloc
