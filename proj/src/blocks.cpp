// ===== Network building blocks =====

#include "ripeloc/blocks.hpp"

#include <cmath>

#include "ripeloc/common.hpp"

namespace ripeloc {

namespace {

Tensor filled_normal(Shape s, double sd, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(s));
  double* p = t.data();
  const int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) p[i] = rng.normal(0.0, sd);
  t.set_requires_grad(true);
  return t;
}

Tensor grad_zeros(Shape s) {
  Tensor t = Tensor::zeros(std::move(s));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

Tensor he_conv(int cout, int cing, int k, Rng& rng) {
  const double sd = std::sqrt(2.0 / (double(cing) * k * k));
  return filled_normal({cout, cing, k, k}, sd, rng);
}

Tensor he_linear(int out, int in, Rng& rng) {
  return filled_normal({out, in}, std::sqrt(2.0 / double(in)), rng);
}

// --- ConvBnSilu ---

ConvBnSilu ConvBnSilu::make(int cin, int cout, int k, int stride, int groups,
                            Rng& rng) {
  if (cin % groups != 0 || cout % groups != 0)
    throw ShapeError("ConvBnSilu: groups " + std::to_string(groups) +
                     " must divide cin " + std::to_string(cin) + " / cout " +
                     std::to_string(cout));
  ConvBnSilu c;
  c.k = k;
  c.stride = stride;
  c.pad = k / 2;
  c.groups = groups;
  c.w = he_conv(cout, cin / groups, k, rng);
  c.bn.init(cout);
  return c;
}

Tensor ConvBnSilu::forward(const Tensor& x, bool training) {
  Tensor y = ag::conv2d(x, w, Tensor(), stride, pad, groups);
  y = ag::batchnorm(y, bn.gamma, bn.beta, bn.run_mean, bn.run_var,
                    training && !frozen);
  return ag::silu(y);
}

void ConvBnSilu::set_frozen(bool f) {
  frozen = f;
  w.set_requires_grad(!f);
  bn.gamma.set_requires_grad(!f);
  bn.beta.set_requires_grad(!f);
}

// --- DsConv ---

DsConv DsConv::make(int cin, int cout, int stride, Rng& rng) {
  DsConv d;
  d.dw = ConvBnSilu::make(cin, cin, 3, stride, cin, rng);
  d.pw = ConvBnSilu::make(cin, cout, 1, 1, 1, rng);
  return d;
}

// --- GhostConv ---

GhostConv GhostConv::make(int cin, int cout, Rng& rng) {
  if (cout % 2 != 0)
    throw ShapeError("GhostConv: cout must be even, got " +
                     std::to_string(cout));
  GhostConv g;
  g.pw = ConvBnSilu::make(cin, cout / 2, 1, 1, 1, rng);
  g.dw_w = he_conv(cout / 2, 1, 3, rng);
  g.dw_bn.init(cout / 2);
  return g;
}

Tensor GhostConv::forward(const Tensor& x, bool training) {
  Tensor p = pw.forward(x, training);
  Tensor g = ag::conv2d(p, dw_w, Tensor(), 1, 1, pw.cout());
  g = ag::batchnorm(g, dw_bn.gamma, dw_bn.beta, dw_bn.run_mean, dw_bn.run_var,
                    training && !frozen);
  return ag::concat_c({p, g});  // ghosts carry no activation
}

void GhostConv::set_frozen(bool f) {
  frozen = f;
  pw.set_frozen(f);
  dw_w.set_requires_grad(!f);
  dw_bn.gamma.set_requires_grad(!f);
  dw_bn.beta.set_requires_grad(!f);
}

// --- Bottleneck ---

Bottleneck Bottleneck::make(int mid, int inner, bool dw, Rng& rng) {
  Bottleneck b;
  b.dw = dw;
  if (dw) {
    b.a_ds = DsConv::make(mid, inner, 1, rng);
    b.b_ds = DsConv::make(inner, mid, 1, rng);
  } else {
    b.a_dense = ConvBnSilu::make(mid, inner, 3, 1, 1, rng);
    b.b_dense = ConvBnSilu::make(inner, mid, 3, 1, 1, rng);
  }
  return b;
}

Tensor Bottleneck::forward(const Tensor& x, bool training) {
  Tensor y = dw ? b_ds.forward(a_ds.forward(x, training), training)
                : b_dense.forward(a_dense.forward(x, training), training);
  return ag::add(x, y);
}

void Bottleneck::visit(const std::string& p, const TensorVisit& v) {
  if (dw) {
    a_ds.visit(p + ".a", v);
    b_ds.visit(p + ".b", v);
  } else {
    a_dense.visit(p + ".a", v);
    b_dense.visit(p + ".b", v);
  }
}

void Bottleneck::set_frozen(bool f) {
  if (dw) {
    a_ds.set_frozen(f);
    b_ds.set_frozen(f);
  } else {
    a_dense.set_frozen(f);
    b_dense.set_frozen(f);
  }
}

int64_t Bottleneck::param_count() const {
  return dw ? a_ds.param_count() + b_ds.param_count()
            : a_dense.param_count() + b_dense.param_count();
}

// --- C3k2 ---

C3k2 C3k2::make(int cin, int cout, bool dw, Rng& rng, int inner1,
                int inner2) {
  if (cin % 2 != 0)
    throw ShapeError("C3k2: cin must be even, got " + std::to_string(cin));
  C3k2 c;
  c.mid = cin / 2;
  if (inner1 < 0) inner1 = c.mid;
  if (inner2 < 0) inner2 = c.mid;
  c.u1 = Bottleneck::make(c.mid, inner1, dw, rng);
  c.u2 = Bottleneck::make(c.mid, inner2, dw, rng);
  c.proj = ConvBnSilu::make(2 * c.mid, cout, 1, 1, 1, rng);
  return c;
}

Tensor C3k2::forward(const Tensor& x, bool training) {
  Tensor h1 = ag::slice_c(x, 0, mid);          // bypass half
  Tensor h2 = ag::slice_c(x, mid, 2 * mid);    // processed half
  Tensor y = u2.forward(u1.forward(h2, training), training);
  return proj.forward(ag::concat_c({h1, y}), training);
}

// --- Sppf ---

Sppf Sppf::make(int cin, int cout, Rng& rng, int red) {
  Sppf s;
  if (red < 0) red = cin / 2;
  s.reduce = ConvBnSilu::make(cin, red, 1, 1, 1, rng);
  s.proj = ConvBnSilu::make(4 * red, cout, 1, 1, 1, rng);
  return s;
}

Tensor Sppf::forward(const Tensor& x, bool training) {
  Tensor r = reduce.forward(x, training);
  Tensor m1 = ag::maxpool(r, 5, 1, 2);
  Tensor m2 = ag::maxpool(m1, 5, 1, 2);
  Tensor m3 = ag::maxpool(m2, 5, 1, 2);
  return proj.forward(ag::concat_c({r, m1, m2, m3}), training);
}

// --- AttnBlock ---

AttnBlock AttnBlock::make(int c, int tokens, Rng& rng) {
  AttnBlock a;
  a.wq = he_linear(c, c, rng);
  a.wk = he_linear(c, c, rng);
  a.wv = he_linear(c, c, rng);
  a.wo = he_linear(c, c, rng);
  a.bq = grad_zeros({c});
  a.bk = grad_zeros({c});
  a.bv = grad_zeros({c});
  a.bo = grad_zeros({c});
  a.pos = filled_normal({tokens, c}, 0.02, rng);
  return a;
}

Tensor AttnBlock::forward(const Tensor& tokens, Tensor* attn_probe) {
  const int n = tokens.dim(0), t = tokens.dim(1), c = tokens.dim(2);
  if (t != pos.dim(0) || c != pos.dim(1))
    throw ShapeError("AttnBlock: tokens " + shape_str(tokens.shape()) +
                     " vs positional table " + shape_str(pos.shape()));
  Tensor tp = ag::add_rows(tokens, pos);
  Tensor flat = ag::reshape(tp, {n * t, c});
  Tensor q = ag::reshape(ag::linear(flat, wq, bq), {n, t, c});
  Tensor k = ag::reshape(ag::linear(flat, wk, bk), {n, t, c});
  Tensor v = ag::reshape(ag::linear(flat, wv, bv), {n, t, c});
  Tensor scores =
      ag::affine(ag::matmul_bt(q, k), 1.0 / std::sqrt(double(c)), 0.0);
  Tensor attn = ag::softmax_last(scores);  // (N,T,T) row-stochastic
  if (attn_probe) *attn_probe = attn;
  Tensor out = ag::matmul_nn(attn, v);
  Tensor o =
      ag::reshape(ag::linear(ag::reshape(out, {n * t, c}), wo, bo), {n, t, c});
  return ag::add(tokens, o);  // residual
}

void AttnBlock::visit(const std::string& p, const TensorVisit& v) {
  v(p + ".wq", wq, false);
  v(p + ".bq", bq, false);
  v(p + ".wk", wk, false);
  v(p + ".bk", bk, false);
  v(p + ".wv", wv, false);
  v(p + ".bv", bv, false);
  v(p + ".wo", wo, false);
  v(p + ".bo", bo, false);
  v(p + ".pos", pos, false);
}

void AttnBlock::set_frozen(bool f) {
  frozen = f;
  Tensor* all[] = {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &pos};
  for (Tensor* t : all) t->set_requires_grad(!f);
}

// --- C2PsaLite ---

C2PsaLite C2PsaLite::make(int cin, int cout, int tokens, Rng& rng, int attn_c,
                          int bypass_c) {
  C2PsaLite c;
  c.attn_c = attn_c < 0 ? cin / 2 : attn_c;
  c.bypass_c = bypass_c < 0 ? cin / 2 : bypass_c;
  c.in_conv = ConvBnSilu::make(cin, c.attn_c + c.bypass_c, 1, 1, 1, rng);
  c.attn = AttnBlock::make(c.attn_c, tokens, rng);
  c.out_conv = ConvBnSilu::make(c.attn_c + c.bypass_c, cout, 1, 1, 1, rng);
  return c;
}

Tensor C2PsaLite::forward(const Tensor& x, bool training,
                          Tensor* attn_probe) {
  Tensor y = in_conv.forward(x, training);
  const int h = y.dim(2), w = y.dim(3);
  Tensor a = ag::slice_c(y, 0, attn_c);
  Tensor byp = ag::slice_c(y, attn_c, attn_c + bypass_c);
  Tensor tok = ag::tokens_from_spatial(a);
  Tensor t2 = attn.forward(tok, attn_probe);
  Tensor a2 = ag::spatial_from_tokens(t2, h, w);
  return out_conv.forward(ag::concat_c({a2, byp}), training);
}

// --- Raam ---

Raam Raam::make(int c, Rng& rng, int hidden) {
  Raam r;
  if (hidden < 0) hidden = c / 4 > 0 ? c / 4 : 1;  // reduction ratio 4
  r.w1 = he_linear(hidden, c, rng);
  r.b1 = grad_zeros({hidden});
  r.w2 = he_linear(c, hidden, rng);
  r.b2 = grad_zeros({c});
  r.beta = grad_zeros({c});
  return r;
}

Tensor Raam::gate_logits(const Tensor& avg, const Tensor& mx) {
  auto fc = [&](const Tensor& v) {
    return ag::linear(ag::silu(ag::linear(v, w1, b1)), w2, b2);
  };
  Tensor s = ag::add(fc(avg), fc(mx));
  const int n = s.dim(0), c = s.dim(1);
  Tensor s3 = ag::add_rows(ag::reshape(s, {n, 1, c}),
                           ag::reshape(beta, {1, c}));
  return ag::reshape(s3, {n, c});
}

Tensor Raam::forward(const Tensor& x, bool) {
  Tensor ga = ag::global_avgpool(x);
  Tensor gm = ag::global_maxpool(x);
  Tensor gate = ag::sigmoid(gate_logits(ga, gm));
  return ag::scale_channels(x, gate);
}

void Raam::visit(const std::string& p, const TensorVisit& v) {
  v(p + ".w1", w1, false);
  v(p + ".b1", b1, false);
  v(p + ".w2", w2, false);
  v(p + ".b2", b2, false);
  v(p + ".beta", beta, false);
}

void Raam::set_frozen(bool f) {
  frozen = f;
  Tensor* all[] = {&w1, &b1, &w2, &b2, &beta};
  for (Tensor* t : all) t->set_requires_grad(!f);
}

// --- RawConv ---

RawConv RawConv::make(int cin, int cout, double bias_init, Rng& rng) {
  RawConv r;
  r.w = he_conv(cout, cin, 1, rng);
  r.b = Tensor::full({cout}, bias_init);
  r.b.set_requires_grad(true);
  return r;
}

void RawConv::set_frozen(bool f) {
  frozen = f;
  w.set_requires_grad(!f);
  b.set_requires_grad(!f);
}

}  // namespace ripeloc
