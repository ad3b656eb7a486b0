// ===== Model assembly =====

#include "ripeloc/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ripeloc/common.hpp"

namespace ripeloc {

namespace {

int width_channels(int base, double w) {
  return int(std::lround(base * w));
}

// closed-form parameter formulas (BN gamma/beta counted, running stats not)
int64_t conv_params(int cin, int cout, int k, int groups = 1) {
  return int64_t(cout) * (cin / groups) * k * k + 2 * int64_t(cout);
}
int64_t ds_params(int cin, int cout) {
  return conv_params(cin, cin, 3, cin) + conv_params(cin, cout, 1);
}
int64_t unit_params(int mid, int inner, bool dw) {
  return dw ? ds_params(mid, inner) + ds_params(inner, mid)
            : conv_params(mid, inner, 3) + conv_params(inner, mid, 3);
}
int64_t c3k2_params(const C3k2Plan& p) {
  const int mid = p.cin / 2;
  return unit_params(mid, p.inner1, p.dw) + unit_params(mid, p.inner2, p.dw) +
         conv_params(2 * mid, p.cout, 1);
}
int64_t sppf_params(const SppfPlan& p) {
  return conv_params(p.cin, p.red, 1) + conv_params(4 * p.red, p.cout, 1);
}
int64_t attn_params(int c, int tokens) {
  return 4 * (int64_t(c) * c + c) + int64_t(tokens) * c;
}
int64_t psa_params(const C2psaPlan& p, int tokens) {
  const int split = p.attn_c + p.bypass_c;
  return conv_params(p.cin, split, 1) + attn_params(p.attn_c, tokens) +
         conv_params(split, p.cout, 1);
}
int64_t raam_params(const RaamPlan& p) {
  return int64_t(p.hidden) * p.c + p.hidden + int64_t(p.c) * p.hidden + p.c +
         p.c;
}
int64_t ghost_params(int cin, int cout) {
  const int half = cout / 2;
  return conv_params(cin, half, 1) + int64_t(half) * 9 + 2 * int64_t(half);
}
int64_t raw_params(int cin, int cout) { return int64_t(cin) * cout + cout; }

int64_t head_params(const HeadPlan& h) {
  return conv_params(h.c3, h.hc, 1) + conv_params(h.c4, h.hc, 1) +
         conv_params(h.c5, h.hc, 1) + conv_params(h.hc, h.hc, 3, h.hc) +
         conv_params(h.hc, h.stem_mid, 1) + raw_params(h.stem_mid, h.classes) +
         3 * raw_params(h.stem_mid, 4 * h.bins);
}

// FLOPs = 2*MACs; convolutions and FC projections only (BN, activations,
// pooling, softmax, the attention TxT matmuls, and biases are excluded)
int64_t cflops(int cin, int cout, int k, int groups, int h, int w) {
  return flops_conv2d(cin, cout, k, groups, h, w);
}
int64_t lflops(int in, int out, int rows) { return 2LL * in * out * rows; }

void bad(const std::string& what) { throw DataError("model plan: " + what); }

void check_edge(const char* name, int a, int b) {
  if (a != b)
    bad(std::string(name) + " width mismatch: " + std::to_string(a) +
        " vs " + std::to_string(b));
}

}  // namespace

int64_t flops_conv2d(int cin, int cout, int k, int groups, int out_h,
                     int out_w) {
  return 2LL * (cin / groups) * cout * k * k * out_h * out_w;
}

ModelPlan nominal_plan(double width_multiple, int num_classes, int input_px,
                       int bins) {
  const double allowed[] = {0.125, 0.25, 0.5, 1.0};
  bool ok = false;
  for (double a : allowed) ok = ok || width_multiple == a;
  if (!ok)
    throw UsageError("width_multiple must be one of 0.125/0.25/0.5/1.0, got " +
                     std::to_string(width_multiple));
  if (input_px <= 0 || input_px % 32 != 0)
    throw UsageError("input size must be a positive multiple of 32, got " +
                     std::to_string(input_px));
  if (num_classes < 1) throw UsageError("num_classes must be >= 1");
  if (bins < 2) throw UsageError("bins must be >= 2");

  const int c1 = width_channels(64, width_multiple);
  const int c2 = width_channels(128, width_multiple);
  const int c3 = width_channels(256, width_multiple);
  const int c4 = width_channels(512, width_multiple);
  const int c5 = width_channels(1024, width_multiple);

  ModelPlan p;
  p.width = width_multiple;
  p.input_px = input_px;
  p.classes = num_classes;
  p.bins = bins;
  p.l0 = {3, c1};
  p.l1 = {c1, c2};
  p.l2 = {c2, c2, c2 / 2, c2 / 2, false};
  p.l3 = {c2, c3};
  p.l4 = {c3, c3, c3 / 2, c3 / 2, false};
  p.l5 = {c3, c4};
  p.l6 = {c4, c4, c4 / 2, c4 / 2, false};
  p.l7 = {c4, c5};
  p.l8 = {c5, c5, c5 / 2, c5 / 2, false};
  p.sppf = {c5, c5, c5 / 2};
  p.psa = {c5, c5, c5 / 2, c5 / 2};
  p.t4 = {c5 + c4, c4, (c5 + c4) / 2, (c5 + c4) / 2, true};
  p.t3 = {c4 + c3, c3, (c4 + c3) / 2, (c4 + c3) / 2, true};
  p.raam3 = {c3, std::max(1, c3 / 4)};
  p.d4 = {c3, c3};
  p.g4 = {c3 + c4, c4};
  p.b4 = {c4, c4, c4 / 2, c4 / 2, true};
  p.raam4 = {c4, std::max(1, c4 / 4)};
  p.d5 = {c4, c4};
  p.g5 = {c4 + c5, c5};
  p.b5 = {c5, c5, c5 / 2, c5 / 2, true};
  p.head = {c3, c4, c5, c3, c3, num_classes, bins};
  return p;
}

void validate_plan(const ModelPlan& p) {
  if (p.input_px <= 0 || p.input_px % 32 != 0)
    bad("input size must be a positive multiple of 32");
  if (p.classes < 1 || p.bins < 2) bad("classes >= 1 and bins >= 2 required");

  const C3k2Plan* blocks[] = {&p.l2, &p.l4, &p.l6, &p.l8,
                              &p.t4, &p.t3, &p.b4, &p.b5};
  const char* bn[] = {"l2", "l4", "l6", "l8", "t4", "t3", "b4", "b5"};
  for (size_t i = 0; i < 8; ++i) {
    const C3k2Plan& c = *blocks[i];
    if (c.cin <= 0 || c.cin % 2 != 0)
      bad(std::string(bn[i]) + ": C3k2 input width must be positive even");
    if (c.cout <= 0 || c.inner1 <= 0 || c.inner2 <= 0)
      bad(std::string(bn[i]) + ": widths must be positive");
  }
  if (p.l0.cin != 3) bad("stem must take 3 input channels");
  check_edge("l0->l1", p.l0.cout, p.l1.cin);
  check_edge("l1->l2", p.l1.cout, p.l2.cin);
  check_edge("l2->l3", p.l2.cout, p.l3.cin);
  check_edge("l3->l4", p.l3.cout, p.l4.cin);
  check_edge("l4->l5", p.l4.cout, p.l5.cin);
  check_edge("l5->l6", p.l5.cout, p.l6.cin);
  check_edge("l6->l7", p.l6.cout, p.l7.cin);
  check_edge("l7->l8", p.l7.cout, p.l8.cin);
  check_edge("l8->sppf", p.l8.cout, p.sppf.cin);
  if (p.sppf.red <= 0) bad("sppf reduce width must be positive");
  check_edge("sppf->psa", p.sppf.cout, p.psa.cin);
  if (p.psa.attn_c <= 0 || p.psa.bypass_c <= 0)
    bad("psa split widths must be positive");
  check_edge("up(P5)+P4 -> t4", p.psa.cout + p.l6.cout, p.t4.cin);
  check_edge("up(T4)+P3 -> t3", p.t4.cout + p.l4.cout, p.t3.cin);
  check_edge("t3 -> raam3", p.t3.cout, p.raam3.c);
  check_edge("raam3 -> d4", p.t3.cout, p.d4.cin);
  check_edge("d4+t4 -> g4", p.d4.cout + p.t4.cout, p.g4.cin);
  if (p.g4.cout % 2 != 0 || p.g5.cout % 2 != 0)
    bad("ghost output widths must be even");
  check_edge("g4 -> b4", p.g4.cout, p.b4.cin);
  check_edge("b4 -> raam4", p.b4.cout, p.raam4.c);
  check_edge("raam4 -> d5", p.b4.cout, p.d5.cin);
  check_edge("d5+P5 -> g5", p.d5.cout + p.psa.cout, p.g5.cin);
  check_edge("g5 -> b5", p.g5.cout, p.b5.cin);
  check_edge("t3 -> head.c3", p.t3.cout, p.head.c3);
  check_edge("b4 -> head.c4", p.b4.cout, p.head.c4);
  check_edge("b5 -> head.c5", p.b5.cout, p.head.c5);
  if (p.head.hc <= 0 || p.head.stem_mid <= 0) bad("head widths must be positive");
  if (p.head.classes != p.classes || p.head.bins != p.bins)
    bad("head classes/bins must match plan");
  if (p.raam3.hidden <= 0 || p.raam4.hidden <= 0)
    bad("raam hidden widths must be positive");
}

int64_t plan_param_count(const ModelPlan& p) {
  const int tokens = (p.input_px / 32) * (p.input_px / 32);
  int64_t n = 0;
  n += conv_params(p.l0.cin, p.l0.cout, 3);
  n += conv_params(p.l1.cin, p.l1.cout, 3);
  n += c3k2_params(p.l2);
  n += conv_params(p.l3.cin, p.l3.cout, 3);
  n += c3k2_params(p.l4);
  n += conv_params(p.l5.cin, p.l5.cout, 3);
  n += c3k2_params(p.l6);
  n += conv_params(p.l7.cin, p.l7.cout, 3);
  n += c3k2_params(p.l8);
  n += sppf_params(p.sppf);
  n += psa_params(p.psa, tokens);
  n += c3k2_params(p.t4) + c3k2_params(p.t3);
  n += raam_params(p.raam3) + raam_params(p.raam4);
  n += ds_params(p.d4.cin, p.d4.cout) + ds_params(p.d5.cin, p.d5.cout);
  n += ghost_params(p.g4.cin, p.g4.cout) + ghost_params(p.g5.cin, p.g5.cout);
  n += c3k2_params(p.b4) + c3k2_params(p.b5);
  n += head_params(p.head);
  return n;
}

int64_t decoupled_head_param_count(const ModelPlan& p) {
  const HeadPlan& h = p.head;
  const int64_t aligns = conv_params(h.c3, h.hc, 1) +
                         conv_params(h.c4, h.hc, 1) +
                         conv_params(h.c5, h.hc, 1);
  const int64_t per_scale = conv_params(h.hc, h.stem_mid, 3) +
                            raw_params(h.stem_mid, h.classes) +
                            conv_params(h.hc, h.stem_mid, 3) +
                            raw_params(h.stem_mid, 4 * h.bins);
  return aligns + 3 * per_scale;
}

Model Model::build(const ModelPlan& plan, uint64_t seed) {
  validate_plan(plan);
  Model m;
  m.plan_ = plan;
  Rng rng(seed);
  const int tokens = (plan.input_px / 32) * (plan.input_px / 32);

  m.bb0 = ConvBnSilu::make(plan.l0.cin, plan.l0.cout, 3, 2, 1, rng);
  m.bb1 = ConvBnSilu::make(plan.l1.cin, plan.l1.cout, 3, 2, 1, rng);
  m.bb2 = C3k2::make(plan.l2.cin, plan.l2.cout, plan.l2.dw, rng,
                     plan.l2.inner1, plan.l2.inner2);
  m.bb3 = ConvBnSilu::make(plan.l3.cin, plan.l3.cout, 3, 2, 1, rng);
  m.bb4 = C3k2::make(plan.l4.cin, plan.l4.cout, plan.l4.dw, rng,
                     plan.l4.inner1, plan.l4.inner2);
  m.bb5 = ConvBnSilu::make(plan.l5.cin, plan.l5.cout, 3, 2, 1, rng);
  m.bb6 = C3k2::make(plan.l6.cin, plan.l6.cout, plan.l6.dw, rng,
                     plan.l6.inner1, plan.l6.inner2);
  m.bb7 = ConvBnSilu::make(plan.l7.cin, plan.l7.cout, 3, 2, 1, rng);
  m.bb8 = C3k2::make(plan.l8.cin, plan.l8.cout, plan.l8.dw, rng,
                     plan.l8.inner1, plan.l8.inner2);
  m.sppf = Sppf::make(plan.sppf.cin, plan.sppf.cout, rng, plan.sppf.red);
  m.psa = C2PsaLite::make(plan.psa.cin, plan.psa.cout, tokens, rng,
                          plan.psa.attn_c, plan.psa.bypass_c);

  m.t4 = C3k2::make(plan.t4.cin, plan.t4.cout, true, rng, plan.t4.inner1,
                    plan.t4.inner2);
  m.t3 = C3k2::make(plan.t3.cin, plan.t3.cout, true, rng, plan.t3.inner1,
                    plan.t3.inner2);
  m.raam3 = Raam::make(plan.raam3.c, rng, plan.raam3.hidden);
  m.d4 = DsConv::make(plan.d4.cin, plan.d4.cout, 2, rng);
  m.g4 = GhostConv::make(plan.g4.cin, plan.g4.cout, rng);
  m.b4 = C3k2::make(plan.b4.cin, plan.b4.cout, true, rng, plan.b4.inner1,
                    plan.b4.inner2);
  m.raam4 = Raam::make(plan.raam4.c, rng, plan.raam4.hidden);
  m.d5 = DsConv::make(plan.d5.cin, plan.d5.cout, 2, rng);
  m.g5 = GhostConv::make(plan.g5.cin, plan.g5.cout, rng);
  m.b5 = C3k2::make(plan.b5.cin, plan.b5.cout, true, rng, plan.b5.inner1,
                    plan.b5.inner2);

  m.align3 = ConvBnSilu::make(plan.head.c3, plan.head.hc, 1, 1, 1, rng);
  m.align4 = ConvBnSilu::make(plan.head.c4, plan.head.hc, 1, 1, 1, rng);
  m.align5 = ConvBnSilu::make(plan.head.c5, plan.head.hc, 1, 1, 1, rng);
  m.stem = DsConv::make(plan.head.hc, plan.head.stem_mid, 1, rng);
  // classification prior: initial P(object) ~ 1/100 per class
  m.cls_out = RawConv::make(plan.head.stem_mid, plan.classes,
                            -std::log(99.0), rng);
  for (int s = 0; s < 3; ++s)
    m.reg_out[s] = RawConv::make(plan.head.stem_mid, 4 * plan.bins, 0.0, rng);
  return m;
}

HeadOutputs Model::forward(const Tensor& images, bool training) {
  return forward_probe(images, training, nullptr);
}

HeadOutputs Model::forward_probe(const Tensor& images, bool training,
                                 Tensor* psa_attn) {
  if (images.ndim() != 4 || images.dim(1) != 3)
    throw ShapeError("model input must be (N,3,H,W), got " +
                     shape_str(images.shape()));
  if (images.dim(2) != plan_.input_px || images.dim(3) != plan_.input_px)
    throw ShapeError("model built for " + std::to_string(plan_.input_px) +
                     "px input, got " + shape_str(images.shape()));

  Tensor x = bb0.forward(images, training);
  x = bb1.forward(x, training);
  x = bb2.forward(x, training);
  x = bb3.forward(x, training);
  Tensor p3 = bb4.forward(x, training);
  x = bb5.forward(p3, training);
  Tensor p4 = bb6.forward(x, training);
  x = bb7.forward(p4, training);
  x = bb8.forward(x, training);
  Tensor p5 = psa.forward(sppf.forward(x, training), training, psa_attn);

  Tensor t4o = t4.forward(ag::concat_c({ag::upsample2(p5), p4}), training);
  Tensor t3o = t3.forward(ag::concat_c({ag::upsample2(t4o), p3}), training);
  Tensor n3 = raam3.forward(t3o, training);
  Tensor g4o =
      g4.forward(ag::concat_c({d4.forward(n3, training), t4o}), training);
  Tensor n4 = raam4.forward(b4.forward(g4o, training), training);
  Tensor g5o =
      g5.forward(ag::concat_c({d5.forward(n4, training), p5}), training);
  Tensor n5 = b5.forward(g5o, training);

  HeadOutputs out;
  const Tensor feats[3] = {n3, n4, n5};
  ConvBnSilu* aligns[3] = {&align3, &align4, &align5};
  for (int s = 0; s < 3; ++s) {
    Tensor f = aligns[s]->forward(feats[s], training);
    Tensor h = stem.forward(f, training);  // shared tensors across scales
    out.cls[s] = cls_out.forward(h);
    out.box[s] = reg_out[s].forward(h);
  }
  return out;
}

void Model::visit(const TensorVisit& v) {
  bb0.visit("backbone.0", v);
  bb1.visit("backbone.1", v);
  bb2.visit("backbone.2", v);
  bb3.visit("backbone.3", v);
  bb4.visit("backbone.4", v);
  bb5.visit("backbone.5", v);
  bb6.visit("backbone.6", v);
  bb7.visit("backbone.7", v);
  bb8.visit("backbone.8", v);
  sppf.visit("backbone.9.sppf", v);
  psa.visit("backbone.9.psa", v);
  t4.visit("neck.t4", v);
  t3.visit("neck.t3", v);
  raam3.visit("neck.raam3", v);
  d4.visit("neck.d4", v);
  g4.visit("neck.g4", v);
  b4.visit("neck.b4", v);
  raam4.visit("neck.raam4", v);
  d5.visit("neck.d5", v);
  g5.visit("neck.g5", v);
  b5.visit("neck.b5", v);
  align3.visit("head.align3", v);
  align4.visit("head.align4", v);
  align5.visit("head.align5", v);
  stem.visit("head.stem", v);
  cls_out.visit("head.cls", v);
  reg_out[0].visit("head.reg3", v);
  reg_out[1].visit("head.reg4", v);
  reg_out[2].visit("head.reg5", v);
}

int64_t Model::param_count() {
  int64_t n = 0;
  visit([&](const std::string&, Tensor& t, bool buffer) {
    if (!buffer) n += t.numel();
  });
  return n;
}

std::vector<std::pair<std::string, Tensor>> Model::named_tensors() {
  std::vector<std::pair<std::string, Tensor>> out;
  visit([&](const std::string& name, Tensor& t, bool) {
    out.emplace_back(name, t);
  });
  return out;
}

void Model::load_tensors(
    const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::map<std::string, Tensor> mine;
  visit([&](const std::string& name, Tensor& t, bool) { mine[name] = t; });
  std::set<std::string> seen;
  for (const auto& [name, src] : tensors) {
    auto it = mine.find(name);
    if (it == mine.end())
      throw DataError("weights: unknown tensor '" + name + "'");
    if (!seen.insert(name).second)
      throw DataError("weights: duplicate tensor '" + name + "'");
    Tensor dst = it->second;
    if (dst.shape() != src.shape())
      throw DataError("weights: tensor '" + name + "' has shape " +
                      shape_str(src.shape()) + ", model expects " +
                      shape_str(dst.shape()));
    std::memcpy(dst.data(), src.data(), sizeof(double) * dst.numel());
  }
  if (seen.size() != mine.size())
    for (const auto& [name, t] : mine)
      if (!seen.count(name))
        throw DataError("weights: missing tensor '" + name + "'");
}

std::vector<LayerRecord> Model::records() const {
  auto conv = [](int i, const ConvPlanSpec& c) {
    return LayerRecord{i, "conv", c.cin, c.cout, 2, false};
  };
  auto csp = [](int i, const C3k2Plan& c) {
    return LayerRecord{i, c.dw ? "dw-c3k2" : "c3k2", c.cin, c.cout, 1, false};
  };
  std::vector<LayerRecord> r = {
      conv(0, plan_.l0), conv(1, plan_.l1), csp(2, plan_.l2),
      conv(3, plan_.l3), csp(4, plan_.l4),  conv(5, plan_.l5),
      csp(6, plan_.l6),  conv(7, plan_.l7), csp(8, plan_.l8),
      LayerRecord{9, "sppf+c2psa", plan_.sppf.cin, plan_.psa.cout, 1, false}};
  for (auto& rec : r) rec.frozen = record_frozen_[size_t(rec.index)];
  return r;
}

void Model::set_backbone_frozen(const std::set<int>& frozen_records) {
  for (int i : frozen_records)
    if (i < 0 || i > 9)
      throw UsageError("freeze index " + std::to_string(i) +
                       " outside backbone records 0..9");
  for (int i = 0; i <= 9; ++i) {
    const bool f = frozen_records.count(i) > 0;
    record_frozen_[size_t(i)] = f;
    switch (i) {
      case 0: bb0.set_frozen(f); break;
      case 1: bb1.set_frozen(f); break;
      case 2: bb2.set_frozen(f); break;
      case 3: bb3.set_frozen(f); break;
      case 4: bb4.set_frozen(f); break;
      case 5: bb5.set_frozen(f); break;
      case 6: bb6.set_frozen(f); break;
      case 7: bb7.set_frozen(f); break;
      case 8: bb8.set_frozen(f); break;
      case 9:
        sppf.set_frozen(f);
        psa.set_frozen(f);
        break;
    }
  }
}

FlopReport Model::flops() const {
  const ModelPlan& p = plan_;
  const int s2 = p.input_px / 2, s4 = p.input_px / 4, s8 = p.input_px / 8,
            s16 = p.input_px / 16, s32 = p.input_px / 32;
  FlopReport rep;

  auto c3k2_dense = [&](const C3k2Plan& c, int s) {
    const int mid = c.cin / 2;
    return cflops(mid, c.inner1, 3, 1, s, s) +
           cflops(c.inner1, mid, 3, 1, s, s) +
           cflops(mid, c.inner2, 3, 1, s, s) +
           cflops(c.inner2, mid, 3, 1, s, s) +
           cflops(2 * mid, c.cout, 1, 1, s, s);
  };

  // backbone
  rep.backbone += cflops(3, p.l0.cout, 3, 1, s2, s2);
  rep.backbone += cflops(p.l1.cin, p.l1.cout, 3, 1, s4, s4);
  rep.backbone += c3k2_dense(p.l2, s4);
  rep.backbone += cflops(p.l3.cin, p.l3.cout, 3, 1, s8, s8);
  rep.backbone += c3k2_dense(p.l4, s8);
  rep.backbone += cflops(p.l5.cin, p.l5.cout, 3, 1, s16, s16);
  rep.backbone += c3k2_dense(p.l6, s16);
  rep.backbone += cflops(p.l7.cin, p.l7.cout, 3, 1, s32, s32);
  rep.backbone += c3k2_dense(p.l8, s32);
  rep.backbone += cflops(p.sppf.cin, p.sppf.red, 1, 1, s32, s32) +
                  cflops(4 * p.sppf.red, p.sppf.cout, 1, 1, s32, s32);
  const int tokens = s32 * s32, split = p.psa.attn_c + p.psa.bypass_c;
  rep.backbone += cflops(p.psa.cin, split, 1, 1, s32, s32) +
                  4 * lflops(p.psa.attn_c, p.psa.attn_c, tokens) +
                  cflops(split, p.psa.cout, 1, 1, s32, s32);

  // neck: record every depthwise-separable site with its dense equivalent
  auto ds_site = [&](const std::string& name, int cin, int cout, int s) {
    FlopSite site;
    site.name = name;
    site.cout = cout;
    site.ds_flops = cflops(cin, cin, 3, cin, s, s) + cflops(cin, cout, 1, 1, s, s);
    site.dense_flops = cflops(cin, cout, 3, 1, s, s);
    rep.neck += site.ds_flops;
    rep.neck_dense_equiv += site.dense_flops;
    rep.neck_ds_sites.push_back(site);
  };
  auto dw_c3k2 = [&](const std::string& name, const C3k2Plan& c, int s) {
    const int mid = c.cin / 2;
    ds_site(name + ".u1.a", mid, c.inner1, s);
    ds_site(name + ".u1.b", c.inner1, mid, s);
    ds_site(name + ".u2.a", mid, c.inner2, s);
    ds_site(name + ".u2.b", c.inner2, mid, s);
    const int64_t proj = cflops(2 * mid, c.cout, 1, 1, s, s);
    rep.neck += proj;
    rep.neck_dense_equiv += proj;  // dense C3k2 keeps the same 1x1 proj
  };
  auto ghost_site = [&](int cin, int cout, int s) {
    rep.neck += cflops(cin, cout / 2, 1, 1, s, s) +
                cflops(cout / 2, cout / 2, 3, cout / 2, s, s);
    rep.neck_dense_equiv += cflops(cin, cout, 3, 1, s, s);
  };
  auto raam_site = [&](const RaamPlan& r) {
    const int64_t fc = 2 * (lflops(r.c, r.hidden, 1) + lflops(r.hidden, r.c, 1));
    rep.neck += fc;
    rep.neck_dense_equiv += fc;  // identical in both neck variants
  };
  dw_c3k2("neck.t4", p.t4, s16);
  dw_c3k2("neck.t3", p.t3, s8);
  raam_site(p.raam3);
  ds_site("neck.d4", p.d4.cin, p.d4.cout, s16);  // stride 2: costed at output
  ghost_site(p.g4.cin, p.g4.cout, s16);
  dw_c3k2("neck.b4", p.b4, s16);
  raam_site(p.raam4);
  ds_site("neck.d5", p.d5.cin, p.d5.cout, s32);
  ghost_site(p.g5.cin, p.g5.cout, s32);
  dw_c3k2("neck.b5", p.b5, s32);

  // head
  const int scales[3] = {s8, s16, s32};
  const int cins[3] = {p.head.c3, p.head.c4, p.head.c5};
  for (int i = 0; i < 3; ++i) {
    const int s = scales[i];
    rep.head += cflops(cins[i], p.head.hc, 1, 1, s, s);
    rep.head += cflops(p.head.hc, p.head.hc, 3, p.head.hc, s, s) +
                cflops(p.head.hc, p.head.stem_mid, 1, 1, s, s);
    rep.head += cflops(p.head.stem_mid, p.classes, 1, 1, s, s);
    rep.head += cflops(p.head.stem_mid, 4 * p.bins, 1, 1, s, s);
  }

  rep.total = rep.backbone + rep.neck + rep.head;
  return rep;
}

ModelPlan plan_from_tensors(
    const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::map<std::string, Shape> shapes;
  for (const auto& [name, t] : tensors) shapes[name] = t.shape();
  auto have = [&](const std::string& n) { return shapes.count(n) > 0; };
  auto sh = [&](const std::string& n) -> const Shape& {
    auto it = shapes.find(n);
    if (it == shapes.end())
      throw DataError("weights: missing tensor '" + n + "'");
    return it->second;
  };

  auto read_c3k2 = [&](const std::string& p) {
    C3k2Plan c;
    c.dw = have(p + ".u1.a.dw.conv.w");
    int mid;
    if (c.dw) {
      mid = sh(p + ".u1.a.dw.conv.w")[0];
      c.inner1 = sh(p + ".u1.a.pw.conv.w")[0];
      c.inner2 = sh(p + ".u2.a.pw.conv.w")[0];
    } else {
      const Shape& a1 = sh(p + ".u1.a.conv.w");
      mid = a1[1];
      c.inner1 = a1[0];
      c.inner2 = sh(p + ".u2.a.conv.w")[0];
    }
    c.cin = 2 * mid;
    c.cout = sh(p + ".proj.conv.w")[0];
    return c;
  };

  ModelPlan p;
  p.l0 = {3, sh("backbone.0.conv.w")[0]};
  p.l1 = {sh("backbone.1.conv.w")[1], sh("backbone.1.conv.w")[0]};
  p.l2 = read_c3k2("backbone.2");
  p.l3 = {sh("backbone.3.conv.w")[1], sh("backbone.3.conv.w")[0]};
  p.l4 = read_c3k2("backbone.4");
  p.l5 = {sh("backbone.5.conv.w")[1], sh("backbone.5.conv.w")[0]};
  p.l6 = read_c3k2("backbone.6");
  p.l7 = {sh("backbone.7.conv.w")[1], sh("backbone.7.conv.w")[0]};
  p.l8 = read_c3k2("backbone.8");
  p.sppf = {sh("backbone.9.sppf.reduce.conv.w")[1],
            sh("backbone.9.sppf.proj.conv.w")[0],
            sh("backbone.9.sppf.reduce.conv.w")[0]};
  {
    const Shape& inw = sh("backbone.9.psa.in.conv.w");
    const int attn_c = sh("backbone.9.psa.attn.wq")[0];
    p.psa = {inw[1], sh("backbone.9.psa.out.conv.w")[0], attn_c,
             inw[0] - attn_c};
    const int t = sh("backbone.9.psa.attn.pos")[0];
    const int side = int(std::lround(std::sqrt(double(t))));
    if (side * side != t)
      throw DataError("weights: positional table rows " + std::to_string(t) +
                      " is not a square grid");
    p.input_px = 32 * side;
  }
  p.t4 = read_c3k2("neck.t4");
  p.t3 = read_c3k2("neck.t3");
  p.raam3 = {sh("neck.raam3.w2")[0], sh("neck.raam3.w1")[0]};
  p.d4 = {sh("neck.d4.dw.conv.w")[0], sh("neck.d4.pw.conv.w")[0]};
  p.g4 = {sh("neck.g4.pw.conv.w")[1], 2 * sh("neck.g4.pw.conv.w")[0]};
  p.b4 = read_c3k2("neck.b4");
  p.raam4 = {sh("neck.raam4.w2")[0], sh("neck.raam4.w1")[0]};
  p.d5 = {sh("neck.d5.dw.conv.w")[0], sh("neck.d5.pw.conv.w")[0]};
  p.g5 = {sh("neck.g5.pw.conv.w")[1], 2 * sh("neck.g5.pw.conv.w")[0]};
  p.b5 = read_c3k2("neck.b5");
  p.head.hc = sh("head.align3.conv.w")[0];
  p.head.c3 = sh("head.align3.conv.w")[1];
  p.head.c4 = sh("head.align4.conv.w")[1];
  p.head.c5 = sh("head.align5.conv.w")[1];
  p.head.stem_mid = sh("head.stem.pw.conv.w")[0];
  p.head.classes = sh("head.cls.w")[0];
  const int reg_ch = sh("head.reg3.w")[0];
  if (reg_ch % 4 != 0)
    throw DataError("weights: regression output channels " +
                    std::to_string(reg_ch) + " not divisible by 4");
  p.head.bins = reg_ch / 4;
  p.classes = p.head.classes;
  p.bins = p.head.bins;
  p.width = double(p.l0.cout) / 64.0;
  validate_plan(p);
  return p;
}

}  // namespace ripeloc
