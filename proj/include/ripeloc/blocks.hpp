#pragma once
// ===== Network building blocks =====
//
// Composition conventions:
//  - every convolution is followed by BatchNorm + SiLU, except the ghost
//    depthwise branch (BN only, so a Dirac ghost kernel duplicates its
//    primaries exactly) and the raw head output convs (logits, bias, no BN);
//  - residual units add AFTER the second activation, so a zero final conv
//    makes the unit an exact identity;
//  - freezing a block pins its parameters AND switches its BN to running
//    statistics, so a frozen subgraph is bit-stable under further training.
//
// Parameter counts have closed-form methods, cross-checked in tests against
// brute-force enumeration via visit(). FLOP counts follow the convention
// "2 * MACs, convolution and fully-connected layers only".

#include <functional>
#include <string>

#include "ripeloc/autodiff.hpp"
#include "ripeloc/rng.hpp"
#include "ripeloc/tensor.hpp"

namespace ripeloc {

// name, tensor, is_buffer (buffers: BN running stats)
using TensorVisit =
    std::function<void(const std::string&, Tensor&, bool)>;

struct BnParams {
  Tensor gamma, beta, run_mean, run_var;
  void init(int c) {
    gamma = Tensor::full({c}, 1.0);
    beta = Tensor::zeros({c});
    run_mean = Tensor::zeros({c});
    run_var = Tensor::full({c}, 1.0);
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }
  int channels() const { return gamma.dim(0); }
  void visit(const std::string& p, const TensorVisit& v) {
    v(p + ".gamma", gamma, false);
    v(p + ".beta", beta, false);
    v(p + ".run_mean", run_mean, true);
    v(p + ".run_var", run_var, true);
  }
};

Tensor he_conv(int cout, int cing, int k, Rng& rng);
Tensor he_linear(int out, int in, Rng& rng);

// --- Conv + BN + SiLU ---
struct ConvBnSilu {
  Tensor w;  // (cout, cin/groups, k, k), no conv bias (BN absorbs it)
  BnParams bn;
  int k = 1, stride = 1, pad = 0, groups = 1;
  bool frozen = false;

  static ConvBnSilu make(int cin, int cout, int k, int stride, int groups,
                         Rng& rng);
  Tensor forward(const Tensor& x, bool training);
  void visit(const std::string& p, const TensorVisit& v) {
    v(p + ".conv.w", w, false);
    bn.visit(p + ".bn", v);
  }
  void set_frozen(bool f);
  int cin() const { return w.dim(1) * groups; }
  int cout() const { return w.dim(0); }
  int64_t param_count() const {
    return w.numel() + 2 * int64_t(cout());  // conv + gamma/beta
  }
  int64_t conv_flops(int hout, int wout) const {
    return 2 * int64_t(w.numel()) * hout * wout;
  }
};

// --- depthwise-separable conv: dw3x3 + pw1x1, both BN+SiLU ---
struct DsConv {
  ConvBnSilu dw, pw;
  static DsConv make(int cin, int cout, int stride, Rng& rng);
  Tensor forward(const Tensor& x, bool training) {
    return pw.forward(dw.forward(x, training), training);
  }
  void visit(const std::string& p, const TensorVisit& v) {
    dw.visit(p + ".dw", v);
    pw.visit(p + ".pw", v);
  }
  void set_frozen(bool f) {
    dw.set_frozen(f);
    pw.set_frozen(f);
  }
  int64_t param_count() const { return dw.param_count() + pw.param_count(); }
};

// --- ghost module: cheap primaries + depthwise ghosts ---
struct GhostConv {
  ConvBnSilu pw;   // cin -> cout/2 primaries (1x1, BN+SiLU)
  Tensor dw_w;     // depthwise 3x3 over primaries
  BnParams dw_bn;  // ghosts get BN but NO activation (identity property)
  bool frozen = false;

  static GhostConv make(int cin, int cout, Rng& rng);
  Tensor forward(const Tensor& x, bool training);
  void visit(const std::string& p, const TensorVisit& v) {
    pw.visit(p + ".pw", v);
    v(p + ".ghost.w", dw_w, false);
    dw_bn.visit(p + ".ghost.bn", v);
  }
  void set_frozen(bool f);
  int cout() const { return 2 * pw.cout(); }
  int64_t param_count() const {
    return pw.param_count() + dw_w.numel() + 2 * int64_t(pw.cout());
  }
};

// --- one residual bottleneck unit: x + b(a(x)); dense 3x3 or dw-separable ---
struct Bottleneck {
  bool dw = false;
  // dense: a,b are 3x3 ConvBnSilu; dw-separable: a,b are DsConv
  ConvBnSilu a_dense, b_dense;
  DsConv a_ds, b_ds;

  static Bottleneck make(int mid, int inner, bool dw, Rng& rng);
  Tensor forward(const Tensor& x, bool training);
  void visit(const std::string& p, const TensorVisit& v);
  void set_frozen(bool f);
  int64_t param_count() const;
};

// --- C3k2: split halves, two residual units on one half, 1x1 projection ---
struct C3k2 {
  int mid = 0;  // = cin/2
  Bottleneck u1, u2;
  ConvBnSilu proj;  // (2*mid) -> cout, 1x1

  // inner1/inner2: first-stage widths inside each unit (default mid)
  static C3k2 make(int cin, int cout, bool dw, Rng& rng, int inner1 = -1,
                   int inner2 = -1);
  Tensor forward(const Tensor& x, bool training);
  void visit(const std::string& p, const TensorVisit& v) {
    u1.visit(p + ".u1", v);
    u2.visit(p + ".u2", v);
    proj.visit(p + ".proj", v);
  }
  void set_frozen(bool f) {
    u1.set_frozen(f);
    u2.set_frozen(f);
    proj.set_frozen(f);
  }
  int64_t param_count() const {
    return u1.param_count() + u2.param_count() + proj.param_count();
  }
};

// --- SPPF: reduce, three chained 5x5/s1 max pools, concat x4, project ---
struct Sppf {
  ConvBnSilu reduce, proj;
  static Sppf make(int cin, int cout, Rng& rng, int red = -1);
  Tensor forward(const Tensor& x, bool training);
  void visit(const std::string& p, const TensorVisit& v) {
    reduce.visit(p + ".reduce", v);
    proj.visit(p + ".proj", v);
  }
  void set_frozen(bool f) {
    reduce.set_frozen(f);
    proj.set_frozen(f);
  }
  int red() const { return reduce.cout(); }
  int64_t param_count() const {
    return reduce.param_count() + proj.param_count();
  }
};

// --- single-head spatial self-attention over HW tokens ---
struct AttnBlock {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // (C,C) projections
  Tensor pos;                             // (T,C) learned positional embedding
  bool frozen = false;

  static AttnBlock make(int c, int tokens, Rng& rng);
  // tokens (N,T,C) -> (N,T,C); attn_probe (optional) receives the (N,T,T)
  // row-stochastic attention matrix
  Tensor forward(const Tensor& tokens, Tensor* attn_probe = nullptr);
  void visit(const std::string& p, const TensorVisit& v);
  void set_frozen(bool f);
  int dim() const { return wq.dim(0); }
  int64_t param_count() const {
    return wq.numel() + bq.numel() + wk.numel() + bk.numel() + wv.numel() +
           bv.numel() + wo.numel() + bo.numel() + pos.numel();
  }
};

// --- C2PSA-lite: 1x1 in, attention on first split, bypass second, 1x1 out ---
struct C2PsaLite {
  int attn_c = 0, bypass_c = 0;
  ConvBnSilu in_conv, out_conv;
  AttnBlock attn;

  static C2PsaLite make(int cin, int cout, int tokens, Rng& rng,
                        int attn_c = -1, int bypass_c = -1);
  Tensor forward(const Tensor& x, bool training,
                 Tensor* attn_probe = nullptr);
  void visit(const std::string& p, const TensorVisit& v) {
    in_conv.visit(p + ".in", v);
    attn.visit(p + ".attn", v);
    out_conv.visit(p + ".out", v);
  }
  void set_frozen(bool f) {
    in_conv.set_frozen(f);
    attn.set_frozen(f);
    out_conv.set_frozen(f);
  }
  int64_t param_count() const {
    return in_conv.param_count() + attn.param_count() +
           out_conv.param_count();
  }
};

// --- RAAM channel attention: dual-pool shared FC bottleneck + bias, sigmoid ---
struct Raam {
  Tensor w1, b1, w2, b2;  // shared two-layer FC (C -> C/r -> C), SiLU between
  Tensor beta;            // (C) learnable pre-sigmoid bias
  bool frozen = false;

  static Raam make(int c, Rng& rng, int hidden = -1);
  Tensor forward(const Tensor& x, bool training);
  // the pre-sigmoid logits for a pooled vector pair, for tests
  Tensor gate_logits(const Tensor& avg, const Tensor& mx);
  void visit(const std::string& p, const TensorVisit& v);
  void set_frozen(bool f);
  int channels() const { return w2.dim(0); }
  int hidden() const { return w1.dim(0); }
  int64_t param_count() const {
    return w1.numel() + b1.numel() + w2.numel() + b2.numel() + beta.numel();
  }
};

// --- raw conv with bias, no BN/activation (head outputs) ---
struct RawConv {
  Tensor w, b;
  bool frozen = false;
  static RawConv make(int cin, int cout, double bias_init, Rng& rng);
  Tensor forward(const Tensor& x) { return ag::conv2d(x, w, b, 1, 0, 1); }
  void visit(const std::string& p, const TensorVisit& v) {
    v(p + ".w", w, false);
    v(p + ".b", b, false);
  }
  void set_frozen(bool f);
  int64_t param_count() const { return w.numel() + b.numel(); }
};

}  // namespace ripeloc
