// ===== BN-gamma channel pruning: ranking, surgery, report =====
//
// Each prunable site owns one BN channel segment plus the surgery that keeps
// removal exact: slice the producer conv's output rows and BN entries, slice
// every consumer's matching input positions, and — where the consumer is
// depthwise-separable — fold the dw BN's eval response to a dead channel
// into the downstream pointwise BN's running mean before slicing. No two
// sites touch the same tensor on the same axis, so site surgeries commute
// and are applied independently of ranking order.

#include "ripeloc/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <tuple>
#include <utility>

#include "json.hpp"

namespace ripeloc {

namespace {

using TensorMap = std::map<std::string, Tensor>;

Tensor& tensor_at(TensorMap& tm, const std::string& name) {
  auto it = tm.find(name);
  if (it == tm.end()) throw DataError("prune: missing tensor " + name);
  return it->second;
}

// keep-indexed copy along one axis (the tensors are small; copies are fine)
Tensor take(const Tensor& t, int axis, const std::vector<int>& keep) {
  Shape ns = t.shape();
  ns[size_t(axis)] = int(keep.size());
  Tensor out = Tensor::zeros(ns);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= t.dim(i);
  for (int i = axis + 1; i < t.ndim(); ++i) inner *= t.dim(i);
  const int64_t n_old = t.dim(axis);
  const double* src = t.data();
  double* dst = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (size_t k = 0; k < keep.size(); ++k)
      std::memcpy(dst + (o * int64_t(keep.size()) + int64_t(k)) * inner,
                  src + (o * n_old + keep[k]) * inner,
                  size_t(inner) * sizeof(double));
  return out;
}

void slice_axis(TensorMap& tm, const std::string& name, int axis,
                const std::vector<int>& keep) {
  Tensor& t = tensor_at(tm, name);
  t = take(t, axis, keep);
}

void slice_bn(TensorMap& tm, const std::string& prefix,
              const std::vector<int>& keep) {
  for (const char* f : {".gamma", ".beta", ".run_mean", ".run_var"})
    slice_axis(tm, prefix + f, 0, keep);
}

// A dead channel reaches a depthwise consumer as exact zero; the dw conv
// keeps it zero but the dw BN (eval mode) maps it to the constant
// silu(beta - mean * gamma / sqrt(var + eps)). Removing the channel drops
// that constant from the pointwise conv's output, so compensate by shifting
// the pw BN's running mean: mean'[o] = mean[o] - sum_c W_pw[o,c] * k_c.
// Training-mode batch statistics absorb the same constant on their own.
void fold_dead_dw(TensorMap& tm, const std::string& dw_bn,
                  const std::string& pw_w, const std::string& pw_bn,
                  const std::vector<int>& removed) {
  if (removed.empty()) return;
  const Tensor& g = tensor_at(tm, dw_bn + ".gamma");
  const Tensor& b = tensor_at(tm, dw_bn + ".beta");
  const Tensor& mu = tensor_at(tm, dw_bn + ".run_mean");
  const Tensor& var = tensor_at(tm, dw_bn + ".run_var");
  const Tensor& w = tensor_at(tm, pw_w);  // (cout, cin, 1, 1)
  Tensor rm = tensor_at(tm, pw_bn + ".run_mean").clone();
  const int cout = w.dim(0), cin = w.dim(1);
  for (int c : removed) {
    const double scale = g.data()[c] / std::sqrt(var.data()[c] + 1e-5);
    const double shift = b.data()[c] - mu.data()[c] * scale;
    const double k = shift * (1.0 / (1.0 + std::exp(-shift)));
    if (k == 0.0) continue;
    for (int o = 0; o < cout; ++o)
      rm.data()[o] -= w.data()[int64_t(o) * cin + c] * k;
  }
  tensor_at(tm, pw_bn + ".run_mean") = rm;
}

struct Keeps {
  std::vector<int> keep_abs;     // BN-absolute indices kept
  std::vector<int> removed_abs;  // BN-absolute indices removed
};

struct Site {
  std::string name;
  std::string gamma;  // tensor name holding the ranking coefficients
  int lo = 0, hi = 0;  // prunable segment within the BN channel axis
  int bn_width = 0;
  std::function<void(TensorMap&, const Keeps&)> apply;
  std::function<void(ModelPlan&, int)> plan_set;  // n = kept segment width
};

// producer ConvBnSilu plus plain conv consumers (dense, 1x1 or raw convs:
// a zero input channel contributes nothing, so slicing is exact as-is)
Site conv_site(const std::string& name, const std::string& prod, int width,
               std::vector<std::string> consumer_ws,
               std::function<void(ModelPlan&, int)> ps) {
  Site s;
  s.name = name;
  s.gamma = prod + ".bn.gamma";
  s.lo = 0;
  s.hi = width;
  s.bn_width = width;
  s.apply = [prod, consumer_ws = std::move(consumer_ws)](TensorMap& tm,
                                                         const Keeps& k) {
    slice_axis(tm, prod + ".conv.w", 0, k.keep_abs);
    slice_bn(tm, prod + ".bn", k.keep_abs);
    for (const std::string& cw : consumer_ws) slice_axis(tm, cw, 1, k.keep_abs);
  };
  s.plan_set = std::move(ps);
  return s;
}

// dw-separable bottleneck inner width: producer <unit>.a.pw, consumer
// <unit>.b (dw group slice + BN fold into the pw running mean)
Site ds_inner_site(const std::string& unit, int width,
                   std::function<void(ModelPlan&, int)> ps) {
  Site s;
  s.name = unit + ".a";
  s.gamma = unit + ".a.pw.bn.gamma";
  s.lo = 0;
  s.hi = width;
  s.bn_width = width;
  s.apply = [unit](TensorMap& tm, const Keeps& k) {
    slice_axis(tm, unit + ".a.pw.conv.w", 0, k.keep_abs);
    slice_bn(tm, unit + ".a.pw.bn", k.keep_abs);
    fold_dead_dw(tm, unit + ".b.dw.bn", unit + ".b.pw.conv.w",
                 unit + ".b.pw.bn", k.removed_abs);
    slice_axis(tm, unit + ".b.dw.conv.w", 0, k.keep_abs);
    slice_bn(tm, unit + ".b.dw.bn", k.keep_abs);
    slice_axis(tm, unit + ".b.pw.conv.w", 1, k.keep_abs);
  };
  s.plan_set = std::move(ps);
  return s;
}

// neck C3k2 output width: consumers are the RAAM gate, the stride-2 DSConv
// downsample (dw fold) and the head align conv
Site neck_out_site(const std::string& blk, const std::string& raam,
                   const std::string& ds, const std::string& align, int width,
                   std::function<void(ModelPlan&, int)> ps) {
  Site s;
  s.name = blk + ".proj";
  s.gamma = blk + ".proj.bn.gamma";
  s.lo = 0;
  s.hi = width;
  s.bn_width = width;
  s.apply = [blk, raam, ds, align](TensorMap& tm, const Keeps& k) {
    slice_axis(tm, blk + ".proj.conv.w", 0, k.keep_abs);
    slice_bn(tm, blk + ".proj.bn", k.keep_abs);
    slice_axis(tm, raam + ".w1", 1, k.keep_abs);
    slice_axis(tm, raam + ".w2", 0, k.keep_abs);
    slice_axis(tm, raam + ".b2", 0, k.keep_abs);
    slice_axis(tm, raam + ".beta", 0, k.keep_abs);
    fold_dead_dw(tm, ds + ".dw.bn", ds + ".pw.conv.w", ds + ".pw.bn",
                 k.removed_abs);
    slice_axis(tm, ds + ".dw.conv.w", 0, k.keep_abs);
    slice_bn(tm, ds + ".dw.bn", k.keep_abs);
    slice_axis(tm, ds + ".pw.conv.w", 1, k.keep_abs);
    slice_axis(tm, align + ".conv.w", 1, k.keep_abs);
  };
  s.plan_set = std::move(ps);
  return s;
}

// stride-2 DSConv output width: sole consumer is the ghost fusion's primary
// 1x1 conv, where this branch occupies the leading concat positions
Site d_site(const std::string& ds, const std::string& ghost_pw_w, int width,
            int ghost_cin, std::function<void(ModelPlan&, int)> ps) {
  Site s;
  s.name = ds + ".pw";
  s.gamma = ds + ".pw.bn.gamma";
  s.lo = 0;
  s.hi = width;
  s.bn_width = width;
  s.apply = [ds, ghost_pw_w, width, ghost_cin](TensorMap& tm, const Keeps& k) {
    slice_axis(tm, ds + ".pw.conv.w", 0, k.keep_abs);
    slice_bn(tm, ds + ".pw.bn", k.keep_abs);
    std::vector<int> cols = k.keep_abs;
    for (int c = width; c < ghost_cin; ++c) cols.push_back(c);
    slice_axis(tm, ghost_pw_w, 1, cols);
  };
  s.plan_set = std::move(ps);
  return s;
}

std::vector<Site> make_sites(const ModelPlan& p) {
  std::vector<Site> sites;
  auto add = [&sites](Site s) { sites.push_back(std::move(s)); };

  add(conv_site("backbone.0", "backbone.0", p.l0.cout, {"backbone.1.conv.w"},
                [](ModelPlan& q, int n) {
                  q.l0.cout = n;
                  q.l1.cin = n;
                }));
  add(conv_site("backbone.2.u1.a", "backbone.2.u1.a", p.l2.inner1,
                {"backbone.2.u1.b.conv.w"},
                [](ModelPlan& q, int n) { q.l2.inner1 = n; }));
  add(conv_site("backbone.2.u2.a", "backbone.2.u2.a", p.l2.inner2,
                {"backbone.2.u2.b.conv.w"},
                [](ModelPlan& q, int n) { q.l2.inner2 = n; }));
  add(conv_site("backbone.2.proj", "backbone.2.proj", p.l2.cout,
                {"backbone.3.conv.w"}, [](ModelPlan& q, int n) {
                  q.l2.cout = n;
                  q.l3.cin = n;
                }));
  add(conv_site("backbone.4.u1.a", "backbone.4.u1.a", p.l4.inner1,
                {"backbone.4.u1.b.conv.w"},
                [](ModelPlan& q, int n) { q.l4.inner1 = n; }));
  add(conv_site("backbone.4.u2.a", "backbone.4.u2.a", p.l4.inner2,
                {"backbone.4.u2.b.conv.w"},
                [](ModelPlan& q, int n) { q.l4.inner2 = n; }));
  add(conv_site("backbone.6.u1.a", "backbone.6.u1.a", p.l6.inner1,
                {"backbone.6.u1.b.conv.w"},
                [](ModelPlan& q, int n) { q.l6.inner1 = n; }));
  add(conv_site("backbone.6.u2.a", "backbone.6.u2.a", p.l6.inner2,
                {"backbone.6.u2.b.conv.w"},
                [](ModelPlan& q, int n) { q.l6.inner2 = n; }));
  add(conv_site("backbone.8.u1.a", "backbone.8.u1.a", p.l8.inner1,
                {"backbone.8.u1.b.conv.w"},
                [](ModelPlan& q, int n) { q.l8.inner1 = n; }));
  add(conv_site("backbone.8.u2.a", "backbone.8.u2.a", p.l8.inner2,
                {"backbone.8.u2.b.conv.w"},
                [](ModelPlan& q, int n) { q.l8.inner2 = n; }));
  add(conv_site("backbone.8.proj", "backbone.8.proj", p.l8.cout,
                {"backbone.9.sppf.reduce.conv.w"}, [](ModelPlan& q, int n) {
                  q.l8.cout = n;
                  q.sppf.cin = n;
                }));

  {
    // SPPF reduce width: the projection sees it four times (input + three
    // pooled copies), so consumer columns remap through the concat
    Site s;
    s.name = "backbone.9.sppf.reduce";
    s.gamma = "backbone.9.sppf.reduce.bn.gamma";
    s.lo = 0;
    s.hi = p.sppf.red;
    s.bn_width = p.sppf.red;
    const int red = p.sppf.red;
    s.apply = [red](TensorMap& tm, const Keeps& k) {
      slice_axis(tm, "backbone.9.sppf.reduce.conv.w", 0, k.keep_abs);
      slice_bn(tm, "backbone.9.sppf.reduce.bn", k.keep_abs);
      std::vector<int> cols;
      for (int seg = 0; seg < 4; ++seg)
        for (int c : k.keep_abs) cols.push_back(seg * red + c);
      slice_axis(tm, "backbone.9.sppf.proj.conv.w", 1, cols);
    };
    s.plan_set = [](ModelPlan& q, int n) { q.sppf.red = n; };
    add(std::move(s));
  }
  add(conv_site("backbone.9.sppf.proj", "backbone.9.sppf.proj", p.sppf.cout,
                {"backbone.9.psa.in.conv.w"}, [](ModelPlan& q, int n) {
                  q.sppf.cout = n;
                  q.psa.cin = n;
                }));
  {
    // C2PSA bypass half only; the attention segment [0, attn_c) always
    // survives (positional table and 1/sqrt(d) change under slicing)
    Site s;
    s.name = "backbone.9.psa.in.bypass";
    s.gamma = "backbone.9.psa.in.bn.gamma";
    s.lo = p.psa.attn_c;
    s.hi = p.psa.attn_c + p.psa.bypass_c;
    s.bn_width = s.hi;
    s.apply = [](TensorMap& tm, const Keeps& k) {
      slice_axis(tm, "backbone.9.psa.in.conv.w", 0, k.keep_abs);
      slice_bn(tm, "backbone.9.psa.in.bn", k.keep_abs);
      slice_axis(tm, "backbone.9.psa.out.conv.w", 1, k.keep_abs);
    };
    s.plan_set = [](ModelPlan& q, int n) { q.psa.bypass_c = n; };
    add(std::move(s));
  }

  add(ds_inner_site("neck.t4.u1", p.t4.inner1,
                    [](ModelPlan& q, int n) { q.t4.inner1 = n; }));
  add(ds_inner_site("neck.t4.u2", p.t4.inner2,
                    [](ModelPlan& q, int n) { q.t4.inner2 = n; }));
  add(ds_inner_site("neck.t3.u1", p.t3.inner1,
                    [](ModelPlan& q, int n) { q.t3.inner1 = n; }));
  add(ds_inner_site("neck.t3.u2", p.t3.inner2,
                    [](ModelPlan& q, int n) { q.t3.inner2 = n; }));
  add(neck_out_site("neck.t3", "neck.raam3", "neck.d4", "head.align3",
                    p.t3.cout, [](ModelPlan& q, int n) {
                      q.t3.cout = n;
                      q.raam3.c = n;
                      q.d4.cin = n;
                      q.head.c3 = n;
                    }));
  add(d_site("neck.d4", "neck.g4.pw.conv.w", p.d4.cout, p.g4.cin,
             [](ModelPlan& q, int n) {
               q.d4.cout = n;
               q.g4.cin = n + q.t4.cout;
             }));
  add(ds_inner_site("neck.b4.u1", p.b4.inner1,
                    [](ModelPlan& q, int n) { q.b4.inner1 = n; }));
  add(ds_inner_site("neck.b4.u2", p.b4.inner2,
                    [](ModelPlan& q, int n) { q.b4.inner2 = n; }));
  add(neck_out_site("neck.b4", "neck.raam4", "neck.d5", "head.align4",
                    p.b4.cout, [](ModelPlan& q, int n) {
                      q.b4.cout = n;
                      q.raam4.c = n;
                      q.d5.cin = n;
                      q.head.c4 = n;
                    }));
  add(d_site("neck.d5", "neck.g5.pw.conv.w", p.d5.cout, p.g5.cin,
             [](ModelPlan& q, int n) {
               q.d5.cout = n;
               q.g5.cin = n + q.psa.cout;
             }));
  add(ds_inner_site("neck.b5.u1", p.b5.inner1,
                    [](ModelPlan& q, int n) { q.b5.inner1 = n; }));
  add(ds_inner_site("neck.b5.u2", p.b5.inner2,
                    [](ModelPlan& q, int n) { q.b5.inner2 = n; }));
  add(conv_site("neck.b5.proj", "neck.b5.proj", p.b5.cout,
                {"head.align5.conv.w"}, [](ModelPlan& q, int n) {
                  q.b5.cout = n;
                  q.head.c5 = n;
                }));

  add(conv_site("head.stem.pw", "head.stem.pw", p.head.stem_mid,
                {"head.cls.w", "head.reg3.w", "head.reg4.w", "head.reg5.w"},
                [](ModelPlan& q, int n) { q.head.stem_mid = n; }));
  return sites;
}

TensorMap named_map(Model& m) {
  TensorMap tm;
  for (auto& [name, t] : m.named_tensors()) tm.emplace(name, t);
  return tm;
}

std::vector<RankedChannel> rank_from(TensorMap& tm,
                                     const std::vector<Site>& sites) {
  std::vector<RankedChannel> out;
  for (size_t si = 0; si < sites.size(); ++si) {
    const Tensor& g = tensor_at(tm, sites[si].gamma);
    for (int c = sites[si].lo; c < sites[si].hi; ++c)
      out.push_back({int(si), c - sites[si].lo, std::abs(g.data()[c])});
  }
  std::sort(out.begin(), out.end(),
            [](const RankedChannel& a, const RankedChannel& b) {
              return std::tie(a.mag, a.layer, a.channel) <
                     std::tie(b.mag, b.layer, b.channel);
            });
  return out;
}

constexpr int kFloor = 4;  // minimum kept channels per site

}  // namespace

std::vector<std::string> prunable_layers(const ModelPlan& plan) {
  std::vector<std::string> names;
  for (const Site& s : make_sites(plan)) names.push_back(s.name);
  return names;
}

std::vector<RankedChannel> rank_channels(Model& m) {
  auto sites = make_sites(m.plan());
  TensorMap tm = named_map(m);
  return rank_from(tm, sites);
}

PruneResult prune(Model& m, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0))
    throw UsageError("prune ratio must be in [0, 1)");

  auto sites = make_sites(m.plan());
  TensorMap tm = named_map(m);
  const auto ranked = rank_from(tm, sites);

  int total = 0;
  for (const Site& s : sites) total += s.hi - s.lo;
  const int64_t want =
      ratio > 0.0 ? std::max<int64_t>(1, std::llround(ratio * total)) : 0;

  std::vector<std::vector<char>> removed(sites.size());
  std::vector<char> floor_hit(sites.size(), 0);
  std::vector<int> removed_n(sites.size(), 0);
  for (size_t i = 0; i < sites.size(); ++i)
    removed[i].assign(size_t(sites[i].hi - sites[i].lo), 0);

  int removed_total = 0;
  for (const RankedChannel& rc : ranked) {
    if (removed_total >= want) break;
    const size_t si = size_t(rc.layer);
    const int width = sites[si].hi - sites[si].lo;
    const int cap = std::max(0, width - kFloor);
    if (removed_n[si] >= cap) {
      floor_hit[si] = 1;
      continue;
    }
    removed[si][size_t(rc.channel)] = 1;
    ++removed_n[si];
    ++removed_total;
  }

  PruneReport rep;
  rep.ratio_requested = ratio;
  rep.channels_total = total;
  rep.channels_removed = removed_total;
  rep.ratio_achieved = total > 0 ? double(removed_total) / total : 0.0;
  rep.params_before = m.param_count();

  ModelPlan plan = m.plan();
  for (size_t i = 0; i < sites.size(); ++i) {
    const Site& s = sites[i];
    Keeps k;
    LayerPrune lp;
    lp.name = s.name;
    lp.before = s.hi - s.lo;
    lp.floor_hit = floor_hit[i] != 0;
    for (int c = 0; c < s.bn_width; ++c) {
      const bool in_seg = c >= s.lo && c < s.hi;
      if (in_seg && removed[i][size_t(c - s.lo)] != 0) {
        k.removed_abs.push_back(c);
      } else {
        k.keep_abs.push_back(c);
        if (in_seg) lp.kept.push_back(c - s.lo);
      }
    }
    s.apply(tm, k);
    s.plan_set(plan, int(lp.kept.size()));
    rep.layers.push_back(std::move(lp));
  }
  validate_plan(plan);

  Model pruned = Model::build(plan, 0);
  std::vector<std::pair<std::string, Tensor>> flat(tm.begin(), tm.end());
  pruned.load_tensors(flat);
  rep.params_after = pruned.param_count();
  return PruneResult{std::move(pruned), std::move(rep)};
}

std::string prune_report_to_json(const PruneReport& r) {
  nlohmann::ordered_json j;
  j["ratio_requested"] = r.ratio_requested;
  j["ratio_achieved"] = r.ratio_achieved;
  j["params_before"] = r.params_before;
  j["params_after"] = r.params_after;
  j["channels_total"] = r.channels_total;
  j["channels_removed"] = r.channels_removed;
  j["layers"] = nlohmann::ordered_json::array();
  for (const LayerPrune& lp : r.layers) {
    nlohmann::ordered_json e;
    e["name"] = lp.name;
    e["before"] = lp.before;
    e["kept"] = lp.kept;
    e["floor_hit"] = lp.floor_hit;
    j["layers"].push_back(std::move(e));
  }
  return j.dump(2) + "\n";
}

TrainResult finetune(Model& m, const std::vector<Sample>& train_set,
                     const std::vector<Sample>& val_set, int epochs,
                     const TrainOptions& opts) {
  PhaseConfig phase;
  phase.frozen = {};
  phase.lr0 = 0.0003;
  phase.epochs = epochs;
  phase.aug = AugStrength::Light;
  return train(m, train_set, val_set, {phase}, opts);
}

}  // namespace ripeloc
