#include "ripeloc/loss.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "ripeloc/common.hpp"

namespace ripeloc {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kEps = 1e-12;
constexpr double kBig = 1e300;

struct Candidate {
  int scale, i, j, gt;
  std::array<double, 4> dist;
  double score;
};

}  // namespace

// ===== Geometry / assignment =====

HeadGeometry geometry_for(int input_px, int bins) {
  if (input_px <= 0 || input_px % 32 != 0)
    throw UsageError("geometry_for: input " + std::to_string(input_px) +
                     " is not a positive multiple of 32");
  if (bins < 2) throw UsageError("geometry_for: bins must be >= 2");
  HeadGeometry g;
  g.input_px = input_px;
  g.bins = bins;
  for (int s = 0; s < 3; ++s) g.grid[size_t(s)] = input_px / g.strides[size_t(s)];
  return g;
}

Assignment assign_targets(const std::vector<GtNorm>& gts,
                          const HeadGeometry& geom, int topk) {
  if (topk < 1) throw UsageError("assign_targets: topk must be >= 1");
  Assignment out;
  out.grid = geom.grid;
  out.bins = geom.bins;
  const double px = geom.input_px;
  const double dmax = geom.bins - 1.0;

  std::vector<Candidate> kept;
  for (size_t gi = 0; gi < gts.size(); ++gi) {
    const GtNorm& g = gts[gi];
    if (g.w <= 0 || g.h <= 0)
      throw DataError("assign_targets: ground truth " + std::to_string(gi) +
                      " has zero area");
    const double x1 = (g.cx - g.w / 2) * px, x2 = (g.cx + g.w / 2) * px;
    const double y1 = (g.cy - g.h / 2) * px, y2 = (g.cy + g.h / 2) * px;
    const double gcx = g.cx * px, gcy = g.cy * px;
    for (int s = 0; s < 3; ++s) {
      const double st = geom.strides[size_t(s)];
      const int n = geom.grid[size_t(s)];
      std::vector<Candidate> cand;
      // only cells whose center can fall inside the box
      const int i0 = std::max(0, int(std::floor(y1 / st - 0.5)));
      const int i1 = std::min(n - 1, int(std::ceil(y2 / st)));
      const int j0 = std::max(0, int(std::floor(x1 / st - 0.5)));
      const int j1 = std::min(n - 1, int(std::ceil(x2 / st)));
      for (int i = i0; i <= i1; ++i) {
        for (int j = j0; j <= j1; ++j) {
          const double ccx = (j + 0.5) * st, ccy = (i + 0.5) * st;
          // strict containment: a center on the box edge belongs to no one
          if (ccx <= x1 || ccx >= x2 || ccy <= y1 || ccy >= y2) continue;
          const std::array<double, 4> d = {(ccx - x1) / st, (ccy - y1) / st,
                                           (x2 - ccx) / st, (y2 - ccy) / st};
          const double m = std::max(std::max(d[0], d[1]), std::max(d[2], d[3]));
          if (m > dmax) continue;  // box does not fit this scale's bin range
          // closeness to the gt center, in stride units
          const double dd = std::hypot(ccx - gcx, ccy - gcy) / st;
          // scale fit: the largest regression target sits best mid-range
          const double fit =
              std::exp(-std::abs(std::log(std::max(m, kEps) / (geom.bins / 4.0))));
          cand.push_back({s, i, j, int(gi), d, fit / (1.0 + dd)});
        }
      }
      std::sort(cand.begin(), cand.end(), [](const Candidate& a,
                                             const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
      });
      if (int(cand.size()) > topk) cand.resize(size_t(topk));
      kept.insert(kept.end(), cand.begin(), cand.end());
    }
  }

  // conflict resolution: one winner per cell, higher score, earlier gt on tie
  std::map<std::array<int, 3>, size_t> winner;
  for (size_t k = 0; k < kept.size(); ++k) {
    const std::array<int, 3> cell = {kept[k].scale, kept[k].i, kept[k].j};
    auto it = winner.find(cell);
    if (it == winner.end() || kept[k].score > kept[it->second].score)
      winner[cell] = k;
  }
  for (const auto& [cell, k] : winner) {
    const Candidate& c = kept[k];
    CellMatch m;
    m.scale = c.scale;
    m.i = c.i;
    m.j = c.j;
    m.gt = c.gt;
    m.cls = gts[size_t(c.gt)].class_id;
    m.dist = c.dist;
    m.score = c.score;
    out.matches.push_back(m);
  }
  // std::map keys are (scale, i, j) ascending already
  return out;
}

// ===== Loss terms =====

Tensor bce(const Tensor& logits, const Tensor& targets) {
  return ag::bce_with_logits(logits, targets, ag::Reduction::Mean);
}

Tensor ciou_loss(const Tensor& pred_dist, const Tensor& gt_dist) {
  if (pred_dist.ndim() != 2 || pred_dist.dim(1) != 4)
    throw ShapeError("ciou_loss: pred must be (M,4), got " +
                     shape_str(pred_dist.shape()));
  if (gt_dist.shape() != pred_dist.shape())
    throw ShapeError("ciou_loss: gt " + shape_str(gt_dist.shape()) +
                     " vs pred " + shape_str(pred_dist.shape()));
  auto col = [](const Tensor& x, int c) { return ag::slice_cols(x, c, c + 1); };
  Tensor lp = col(pred_dist, 0), tp = col(pred_dist, 1);
  Tensor rp = col(pred_dist, 2), bp = col(pred_dist, 3);
  Tensor lg = col(gt_dist, 0), tg = col(gt_dist, 1);
  Tensor rg = col(gt_dist, 2), bg = col(gt_dist, 3);

  Tensor wp = ag::add(lp, rp), hp = ag::add(tp, bp);
  Tensor wg = ag::add(lg, rg), hg = ag::add(tg, bg);

  // both boxes contain the anchor point, so the overlap is direct
  Tensor iw = ag::add(ag::min2(lp, lg), ag::min2(rp, rg));
  Tensor ih = ag::add(ag::min2(tp, tg), ag::min2(bp, bg));
  Tensor inter = ag::mul(iw, ih);
  Tensor uni = ag::sub(ag::add(ag::mul(wp, hp), ag::mul(wg, hg)), inter);
  Tensor iou = ag::divt(inter, ag::clampv(uni, kEps, kBig));

  // center gap over enclosing-box diagonal
  Tensor dx = ag::affine(ag::sub(ag::sub(rp, lp), ag::sub(rg, lg)), 0.5, 0.0);
  Tensor dy = ag::affine(ag::sub(ag::sub(bp, tp), ag::sub(bg, tg)), 0.5, 0.0);
  Tensor rho2 = ag::add(ag::square(dx), ag::square(dy));
  Tensor cw = ag::add(ag::max2(lp, lg), ag::max2(rp, rg));
  Tensor ch = ag::add(ag::max2(tp, tg), ag::max2(bp, bg));
  Tensor c2 = ag::clampv(ag::add(ag::square(cw), ag::square(ch)), kEps, kBig);

  // aspect-ratio term, composed through alpha on the tape
  Tensor ap = ag::atan_t(ag::divt(wp, ag::clampv(hp, kEps, kBig)));
  Tensor agt = ag::atan_t(ag::divt(wg, ag::clampv(hg, kEps, kBig)));
  Tensor v = ag::affine(ag::square(ag::sub(agt, ap)), 4.0 / (kPi * kPi), 0.0);
  Tensor one_m_iou = ag::affine(iou, -1.0, 1.0);
  Tensor alpha =
      ag::divt(v, ag::clampv(ag::add(one_m_iou, v), kEps, kBig));

  Tensor per =
      ag::add(ag::add(one_m_iou, ag::divt(rho2, c2)), ag::mul(alpha, v));
  return ag::mean_all(per);
}

Tensor dfl(const Tensor& dist_logits, const Tensor& target) {
  return ag::dfl_loss_mean(dist_logits, target);
}

// ===== Total objective =====

LossParts total_loss(const HeadOutputs& heads,
                     const std::vector<Assignment>& batch,
                     const LossWeights& w) {
  const int n_img = heads.cls[0].dim(0);
  if (int(batch.size()) != n_img)
    throw ShapeError("total_loss: " + std::to_string(batch.size()) +
                     " assignments for a batch of " + std::to_string(n_img));
  const int classes = heads.cls[0].dim(1);
  const int bins = heads.box[0].dim(1) / 4;

  LossParts parts;

  // classification: mean BCE over every cell of every scale
  Tensor bce_sum;
  int64_t n_elems = 0;
  for (int s = 0; s < 3; ++s) {
    const Tensor& z = heads.cls[size_t(s)];
    Tensor tgt = Tensor::zeros(z.shape());
    const int side = z.dim(2);
    for (int n = 0; n < n_img; ++n) {
      for (const CellMatch& m : batch[size_t(n)].matches) {
        if (m.scale != s) continue;
        if (m.cls < 0 || m.cls >= classes)
          throw ShapeError("total_loss: target class " + std::to_string(m.cls) +
                           " outside " + std::to_string(classes) + " classes");
        tgt.data()[((int64_t(n) * classes + m.cls) * side + m.i) * side + m.j] =
            1.0;
      }
    }
    Tensor term = ag::bce_with_logits(z, tgt, ag::Reduction::Sum);
    bce_sum = s == 0 ? term : ag::add(bce_sum, term);
    n_elems += z.numel();
  }
  Tensor bce_mean = ag::affine(bce_sum, 1.0 / double(n_elems), 0.0);
  parts.cls = bce_mean.data()[0];

  // pool matched cells across the batch, per scale
  std::array<std::vector<std::array<int, 3>>, 3> nij;
  std::array<std::vector<std::array<double, 4>>, 3> dists;
  for (int n = 0; n < n_img; ++n) {
    for (const CellMatch& m : batch[size_t(n)].matches) {
      nij[size_t(m.scale)].push_back({n, m.i, m.j});
      dists[size_t(m.scale)].push_back(m.dist);
    }
  }

  std::vector<Tensor> logit_rows, target_rows;
  for (int s = 0; s < 3; ++s) {
    const size_t ms = nij[size_t(s)].size();
    if (ms == 0) continue;
    Tensor rows = ag::gather_cells(heads.box[size_t(s)], nij[size_t(s)]);
    logit_rows.push_back(ag::reshape(rows, {int(ms), 4, bins}));
    Tensor t = Tensor::zeros({int(ms), 4});
    for (size_t r = 0; r < ms; ++r)
      for (int d = 0; d < 4; ++d)
        t.data()[r * 4 + size_t(d)] = dists[size_t(s)][r][size_t(d)];
    target_rows.push_back(t);
  }

  for (const auto& v : nij) parts.n_matched += int(v.size());

  if (parts.n_matched == 0) {
    parts.total = ag::affine(bce_mean, w.cls, 0.0);
    return parts;
  }

  Tensor logits = logit_rows.size() == 1 ? logit_rows[0]
                                         : ag::concat_rows(logit_rows);
  Tensor targets = target_rows.size() == 1 ? target_rows[0]
                                           : ag::concat_rows(target_rows);

  Tensor pred = ag::softmax_expectation(logits);  // (M,4)
  Tensor box_term = ciou_loss(pred, targets);
  Tensor dfl_term = ag::dfl_loss_mean(logits, targets);
  parts.box = box_term.data()[0];
  parts.dfl = dfl_term.data()[0];

  parts.total = ag::add(
      ag::affine(bce_mean, w.cls, 0.0),
      ag::add(ag::affine(box_term, w.box, 0.0), ag::affine(dfl_term, w.dfl, 0.0)));
  return parts;
}

}  // namespace ripeloc
