#pragma once
// ===== Training objective: BCE + CIoU + DFL over center-prior assignment ====
//
// Ground truth arrives in the label-file convention: class id plus a
// normalized (cx, cy, w, h) box at input resolution. assign_targets turns a
// scene into per-cell regression targets; total_loss composes the scalar
// objective on the autodiff tape so one backward() covers the whole model.
//
// Box targets are stored as (l, t, r, b) distances from the cell center in
// stride units, matching the head's side-major DFL channel layout. A cell is
// only eligible for a ground truth when every distance fits inside
// [0, bins-1], so dfl() never clamps on assigned cells.

#include <array>
#include <vector>

#include "ripeloc/autodiff.hpp"
#include "ripeloc/model.hpp"

namespace ripeloc {

// One labeled instance, normalized to [0,1] of the input square.
struct GtNorm {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;
};

struct CellMatch {
  int scale = 0;  // 0..2 (strides 8/16/32)
  int i = 0, j = 0;
  int gt = 0;
  int cls = 0;
  std::array<double, 4> dist{};  // l,t,r,b, stride units, each in [0, bins-1]
  double score = 0;              // assignment score that won this cell
};

struct Assignment {
  std::vector<CellMatch> matches;  // sorted by (scale, i, j)
  std::array<int, 3> grid{};
  int bins = 16;
};

struct HeadGeometry {
  int input_px = 640;
  int bins = 16;
  std::array<int, 3> strides{8, 16, 32};
  std::array<int, 3> grid{80, 40, 20};
};
// input_px must be a positive multiple of 32.
HeadGeometry geometry_for(int input_px, int bins = 16);

// Center-prior assignment: candidate cells have their center inside the gt
// box and all four distances within the DFL range; per gt and per scale the
// top-k by score survive; cells contested by several gts go to the higher
// score. Zero-area gt boxes are rejected with DataError.
Assignment assign_targets(const std::vector<GtNorm>& gts,
                          const HeadGeometry& geom, int topk = 10);

struct LossWeights {
  double cls = 0.5;
  double box = 7.5;
  double dfl = 1.5;
};

struct LossParts {
  Tensor total;          // scalar, lives on the tape
  double cls = 0;        // unweighted component values (diagnostics)
  double box = 0;
  double dfl = 0;
  int n_matched = 0;
};

// Mean stabilized binary cross entropy; shapes must match, targets in {0,1}.
Tensor bce(const Tensor& logits, const Tensor& targets);

// Mean CIoU loss over matched rows. Both inputs are (M,4) distance boxes
// around a shared anchor point; gt rows carry no gradient. The aspect term
// is composed through alpha on the tape (no detach), so finite differences
// of the full expression match backward().
Tensor ciou_loss(const Tensor& pred_dist, const Tensor& gt_dist);

// Two-adjacent-bin cross entropy, mean over (M,4) sides; wraps the tape op.
Tensor dfl(const Tensor& dist_logits, const Tensor& target);

// lambda_cls * BCE(all cells) + lambda_box * mean CIoU + lambda_dfl * mean
// DFL, matches pooled across the batch; with zero matches only the
// classification term remains. `batch` holds one Assignment per image and
// must line up with the head batch dimension.
LossParts total_loss(const HeadOutputs& heads,
                     const std::vector<Assignment>& batch,
                     const LossWeights& w = {});

}  // namespace ripeloc
