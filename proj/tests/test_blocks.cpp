// ===== Block-level tests: fixtures, algebra, and gradient checks =====

#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "doctest.h"
#include "ripeloc/blocks.hpp"
#include "support/gradcheck.hpp"

using namespace ripeloc;

namespace {

Tensor randn(Shape s, Rng& rng, double sd = 1.0) {
  Tensor t = Tensor::zeros(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.0, sd);
  return t;
}

void fill_zero(Tensor t) {
  std::memset(t.data(), 0, sizeof(double) * t.numel());
}

// BN that is exactly the identity in eval mode with fresh stats (rm=0, rv=1):
// gamma = sqrt(1 + eps) makes (x/sqrt(1+eps)) * gamma == x up to last-ulp.
void neutralize_bn(BnParams& bn) {
  const double g = std::sqrt(1.0 + 1e-5);
  for (int i = 0; i < bn.channels(); ++i) bn.gamma.data()[i] = g;
  fill_zero(bn.beta);
}

std::vector<Tensor> block_buffers(const std::function<void(const TensorVisit&)>& visit) {
  std::vector<Tensor> bufs;
  visit([&](const std::string&, Tensor& t, bool buffer) {
    if (buffer) bufs.push_back(t);
  });
  return bufs;
}

// Train-mode forwards update BN running stats in place; wrap the forward so
// every gradcheck evaluation starts from the same buffer state.
std::function<Tensor()> restoring(std::vector<Tensor> bufs,
                                  std::function<Tensor()> fwd) {
  auto snap = std::make_shared<std::vector<std::vector<double>>>();
  for (Tensor& b : bufs)
    snap->emplace_back(b.data(), b.data() + b.numel());
  return [bufs, snap, fwd]() mutable {
    for (size_t i = 0; i < bufs.size(); ++i)
      std::memcpy(bufs[i].data(), (*snap)[i].data(),
                  sizeof(double) * (*snap)[i].size());
    return fwd();
  };
}

}  // namespace

TEST_CASE("conv_bn_silu: stride 2 halves a 640 input") {
  Rng rng(11);
  ConvBnSilu c = ConvBnSilu::make(3, 8, 3, 2, 1, rng);
  Tensor x = randn({1, 3, 640, 640}, rng);
  Tensor y = c.forward(x, false);
  CHECK(y.shape() == Shape{1, 8, 320, 320});
}

TEST_CASE("conv_bn_silu: zero kernel and zero BN beta give exactly zero") {
  Rng rng(12);
  ConvBnSilu c = ConvBnSilu::make(4, 6, 3, 1, 1, rng);
  fill_zero(c.w);
  fill_zero(c.bn.beta);
  Tensor x = randn({2, 4, 7, 7}, rng);
  for (bool training : {true, false}) {
    Tensor y = c.forward(x, training);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
  }
}

TEST_CASE("conv_bn_silu: translation covariance in eval mode") {
  Rng rng(13);
  ConvBnSilu c = ConvBnSilu::make(3, 5, 3, 1, 1, rng);
  const int h = 16, w = 16;
  Tensor x = randn({1, 3, h, w}, rng);
  // x2 = x shifted down one row (row 0 arbitrary zeros)
  Tensor x2 = Tensor::zeros({1, 3, h, w});
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 1; i < h; ++i)
      std::memcpy(x2.data() + (int64_t(ch) * h + i) * w,
                  x.data() + (int64_t(ch) * h + i - 1) * w,
                  sizeof(double) * w);
  Tensor y = c.forward(x, false), y2 = c.forward(x2, false);
  // interior rows: receptive fields see identical data => bitwise equality
  for (int co = 0; co < 5; ++co)
    for (int i = 2; i < h - 1; ++i)
      for (int j = 0; j < w; ++j)
        CHECK(y2.at({0, co, i, j}) == y.at({0, co, i - 1, j}));
}

TEST_CASE("conv_bn_silu: gradcheck through conv+BN(train)+silu") {
  Rng rng(14);
  ConvBnSilu c = ConvBnSilu::make(3, 4, 3, 1, 1, rng);
  Tensor x = randn({2, 3, 6, 6}, rng);
  auto bufs = block_buffers(
      [&](const TensorVisit& v) { c.visit("c", v); });
  auto f = restoring(bufs, [&]() { return c.forward(x, true); });
  auto res = gradcheck::check(f, {c.w, c.bn.gamma, c.bn.beta, x}, 21);
  CHECK(res.max_rel_err < gradcheck::kTol);
}

TEST_CASE("c3k2: identity bottlenecks reduce the block to its projection") {
  Rng rng(15);
  for (bool dw : {false, true}) {
    CAPTURE(dw);
    C3k2 blk = C3k2::make(8, 6, dw, rng);
    // Dirac first stage, zero final stage => residual branch adds exactly 0
    if (dw) {
      fill_zero(blk.u1.b_ds.pw.w);
      fill_zero(blk.u1.b_ds.pw.bn.beta);
      fill_zero(blk.u2.b_ds.pw.w);
      fill_zero(blk.u2.b_ds.pw.bn.beta);
    } else {
      for (Bottleneck* u : {&blk.u1, &blk.u2}) {
        fill_zero(u->a_dense.w);
        for (int i = 0; i < 4; ++i) u->a_dense.w.data()[(i * 4 + i) * 9 + 4] = 1.0;
        fill_zero(u->b_dense.w);
        fill_zero(u->b_dense.bn.beta);
      }
    }
    Rng rx(16);
    Tensor x = randn({2, 8, 5, 5}, rx);
    Tensor y = blk.forward(x, false);
    Tensor yproj = blk.proj.forward(x, false);
    REQUIRE(y.shape() == yproj.shape());
    for (int64_t i = 0; i < y.numel(); ++i)
      CHECK(y.data()[i] == yproj.data()[i]);
  }
}

TEST_CASE("c3k2: odd input width rejected") {
  Rng rng(17);
  CHECK_THROWS_AS(C3k2::make(7, 8, false, rng), ShapeError);
}

TEST_CASE("c3k2: depthwise stage weights shrink by ~ 1/cout + 1/k^2") {
  Rng rng(18);
  C3k2 dense = C3k2::make(64, 64, false, rng);
  C3k2 dw = C3k2::make(64, 64, true, rng);
  CHECK(dw.param_count() < dense.param_count());
  // one 3x3 stage, weights only: dense 9*32*32 vs depthwise 9*32 + 32*32
  const double dense_w = double(dense.u1.a_dense.w.numel());
  const double dw_w =
      double(dw.u1.a_ds.dw.w.numel() + dw.u1.a_ds.pw.w.numel());
  const double expect = 1.0 / 32.0 + 1.0 / 9.0;
  CHECK(dw_w / dense_w == doctest::Approx(expect).epsilon(0.05));
}

TEST_CASE("c3k2: forward equals a hand-composed op sequence") {
  Rng rng(19);
  C3k2 blk = C3k2::make(6, 10, false, rng);
  Rng rx(20);
  Tensor x = randn({1, 6, 7, 7}, rx);
  Tensor y = blk.forward(x, false);

  auto cbs = [](ConvBnSilu& c, const Tensor& in) {
    Tensor t = ag::conv2d(in, c.w, Tensor(), c.stride, c.pad, c.groups);
    t = ag::batchnorm(t, c.bn.gamma, c.bn.beta, c.bn.run_mean, c.bn.run_var,
                      false);
    return ag::silu(t);
  };
  Tensor h1 = ag::slice_c(x, 0, 3), h2 = ag::slice_c(x, 3, 6);
  Tensor u1 = ag::add(h2, cbs(blk.u1.b_dense, cbs(blk.u1.a_dense, h2)));
  Tensor u2 = ag::add(u1, cbs(blk.u2.b_dense, cbs(blk.u2.a_dense, u1)));
  Tensor ref = cbs(blk.proj, ag::concat_c({h1, u2}));
  REQUIRE(y.shape() == ref.shape());
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == ref.data()[i]);
}

TEST_CASE("c3k2: gradcheck (dense and depthwise)") {
  for (bool dw : {false, true}) {
    CAPTURE(dw);
    Rng rng(22);
    C3k2 blk = C3k2::make(4, 4, dw, rng);
    Tensor x = randn({2, 4, 5, 5}, rng);
    std::vector<Tensor> params = {x};
    blk.visit("b", [&](const std::string&, Tensor& t, bool buffer) {
      if (!buffer) params.push_back(t);
    });
    auto bufs = block_buffers(
        [&](const TensorVisit& v) { blk.visit("b", v); });
    auto f = restoring(bufs, [&]() { return blk.forward(x, true); });
    auto res = gradcheck::check(f, params, 23, 48);
    CHECK(res.max_rel_err < gradcheck::kTol);
  }
}

TEST_CASE("ghost: dirac ghosts duplicate the primaries") {
  Rng rng(24);
  GhostConv g = GhostConv::make(8, 8, rng);
  // primary conv selects the first 4 input channels
  fill_zero(g.pw.w);
  for (int i = 0; i < 4; ++i) g.pw.w.data()[i * 8 + i] = 1.0;
  neutralize_bn(g.pw.bn);
  // ghost depthwise = Dirac, BN neutral, and (by design) no activation
  fill_zero(g.dw_w);
  for (int i = 0; i < 4; ++i) g.dw_w.data()[i * 9 + 4] = 1.0;
  neutralize_bn(g.dw_bn);

  Tensor x = randn({2, 8, 6, 6}, rng);
  Tensor y = g.forward(x, false);
  REQUIRE(y.shape() == Shape{2, 8, 6, 6});
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j)
          CHECK(y.at({n, c + 4, i, j}) ==
                doctest::Approx(y.at({n, c, i, j})).epsilon(1e-12));
}

TEST_CASE("ghost: parameters stay below a dense 3x3 fusion") {
  Rng rng(25);
  GhostConv g = GhostConv::make(192, 128, rng);
  const int64_t dense = int64_t(192) * 128 * 9 + 2 * 128;
  CHECK(g.param_count() < dense);
  // weights roughly 192*64 (primary) + 64*9 (ghost)
  const int64_t w = g.pw.w.numel() + g.dw_w.numel();
  CHECK(w == 192 * 64 + 64 * 9);
}

TEST_CASE("ghost: mismatched fusion extents rejected") {
  Tensor a = Tensor::zeros({1, 4, 6, 6});
  Tensor b = Tensor::zeros({1, 4, 6, 5});
  CHECK_THROWS_AS(ag::concat_c({a, b}), ShapeError);
}

TEST_CASE("ghost: gradcheck") {
  Rng rng(26);
  GhostConv g = GhostConv::make(4, 6, rng);
  Tensor x = randn({2, 4, 5, 5}, rng);
  std::vector<Tensor> params = {x};
  g.visit("g", [&](const std::string&, Tensor& t, bool buffer) {
    if (!buffer) params.push_back(t);
  });
  auto bufs = block_buffers([&](const TensorVisit& v) { g.visit("g", v); });
  auto f = restoring(bufs, [&]() { return g.forward(x, true); });
  auto res = gradcheck::check(f, params, 27);
  CHECK(res.max_rel_err < gradcheck::kTol);
}

TEST_CASE("sppf: constant input produces a constant output") {
  Rng rng(28);
  Sppf s = Sppf::make(3, 5, rng, 2);
  Tensor x = Tensor::full({1, 3, 9, 9}, 0.7);
  Tensor y = s.forward(x, false);
  for (int c = 0; c < 5; ++c) {
    const double v0 = y.at({0, c, 0, 0});
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < 9; ++j) CHECK(y.at({0, c, i, j}) == v0);
  }
}

TEST_CASE("sppf: one bright pixel spreads to 13x13 support") {
  Rng rng(29);
  Sppf s = Sppf::make(1, 1, rng, 1);
  // identity-ish reduce (positive values pass silu with positive output)
  s.reduce.w.data()[0] = 1.0;
  neutralize_bn(s.reduce.bn);
  // projection picks the thrice-pooled branch only
  fill_zero(s.proj.w);
  s.proj.w.data()[3] = 1.0;
  neutralize_bn(s.proj.bn);

  Tensor x = Tensor::zeros({1, 1, 20, 20});
  x.at({0, 0, 9, 9}) = 3.0;
  Tensor y = s.forward(x, false);
  int support = 0;
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 20; ++j)
      if (y.at({0, 0, i, j}) != 0.0) {
        ++support;
        CHECK(std::abs(i - 9) <= 6);
        CHECK(std::abs(j - 9) <= 6);
      }
  CHECK(support == 13 * 13);

  // dilation-radius oracle on the raw pooling cascade: 25 -> 81 -> 169
  Tensor m = ag::maxpool(x, 5, 1, 2);
  auto count = [](const Tensor& t) {
    int n = 0;
    for (int64_t i = 0; i < t.numel(); ++i) n += t.data()[i] != 0.0;
    return n;
  };
  CHECK(count(m) == 25);
  m = ag::maxpool(m, 5, 1, 2);
  CHECK(count(m) == 81);
  m = ag::maxpool(m, 5, 1, 2);
  CHECK(count(m) == 169);
}

TEST_CASE("sppf: concat width is 4x the reduced width and gradcheck passes") {
  Rng rng(30);
  Sppf s = Sppf::make(4, 6, rng, 3);
  CHECK(s.proj.cin() == 4 * 3);
  Tensor x = randn({1, 4, 6, 6}, rng);
  std::vector<Tensor> params = {x};
  s.visit("s", [&](const std::string&, Tensor& t, bool buffer) {
    if (!buffer) params.push_back(t);
  });
  auto bufs = block_buffers([&](const TensorVisit& v) { s.visit("s", v); });
  auto f = restoring(bufs, [&]() { return s.forward(x, true); });
  auto res = gradcheck::check(f, params, 31, 48);
  CHECK(res.max_rel_err < gradcheck::kTol);
}

TEST_CASE("c2psa: zero query/key weights give uniform row-stochastic attention") {
  Rng rng(32);
  C2PsaLite blk = C2PsaLite::make(8, 8, 16, rng);
  fill_zero(blk.attn.wq);
  fill_zero(blk.attn.wk);
  Tensor x = randn({2, 8, 4, 4}, rng);
  Tensor attn;
  Tensor y = blk.forward(x, false, &attn);
  CHECK(y.shape() == Shape{2, 8, 4, 4});
  REQUIRE(attn.shape() == Shape{2, 16, 16});
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 16; ++i) {
      double row = 0.0;
      for (int j = 0; j < 16; ++j) {
        const double a = attn.at({n, i, j});
        CHECK(a == doctest::Approx(1.0 / 16.0).epsilon(1e-10));
        row += a;
      }
      CHECK(std::abs(row - 1.0) <= 1e-10);
    }
}

TEST_CASE("c2psa: attention rows are stochastic with arbitrary weights") {
  Rng rng(33);
  C2PsaLite blk = C2PsaLite::make(8, 8, 9, rng);
  Tensor x = randn({1, 8, 3, 3}, rng);
  Tensor attn;
  blk.forward(x, false, &attn);
  for (int i = 0; i < 9; ++i) {
    double row = 0.0;
    for (int j = 0; j < 9; ++j) row += attn.at({0, i, j});
    CHECK(std::abs(row - 1.0) <= 1e-10);
  }
}

TEST_CASE("c2psa: preserves (1,256,20,20) at width 0.25") {
  Rng rng(34);
  C2PsaLite blk = C2PsaLite::make(256, 256, 400, rng);
  Tensor x = randn({1, 256, 20, 20}, rng, 0.1);
  Tensor y = blk.forward(x, false);
  CHECK(y.shape() == Shape{1, 256, 20, 20});
}

TEST_CASE("c2psa: gradcheck") {
  Rng rng(35);
  C2PsaLite blk = C2PsaLite::make(4, 4, 4, rng);
  Tensor x = randn({2, 4, 2, 2}, rng);
  std::vector<Tensor> params = {x};
  blk.visit("p", [&](const std::string&, Tensor& t, bool buffer) {
    if (!buffer) params.push_back(t);
  });
  auto bufs = block_buffers([&](const TensorVisit& v) { blk.visit("p", v); });
  auto f = restoring(bufs, [&]() { return blk.forward(x, true); });
  auto res = gradcheck::check(f, params, 36, 48);
  CHECK(res.max_rel_err < gradcheck::kTol);
}

TEST_CASE("raam: zero FC and zero beta give exactly half the input") {
  Rng rng(37);
  Raam r = Raam::make(8, rng);
  fill_zero(r.w1);
  fill_zero(r.w2);
  Tensor x = randn({2, 8, 5, 5}, rng);
  Tensor y = r.forward(x, false);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[i] == 0.5 * x.data()[i]);
}

TEST_CASE("raam: saturated beta passes the input through") {
  Rng rng(38);
  Raam r = Raam::make(6, rng);
  fill_zero(r.w1);
  fill_zero(r.w2);
  for (int i = 0; i < 6; ++i) r.beta.data()[i] = 100.0;
  Tensor x = randn({1, 6, 4, 4}, rng);
  Tensor y = r.forward(x, false);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(std::abs(y.data()[i] - x.data()[i]) <= 1e-10);
}

TEST_CASE("raam: beta shifts the pre-sigmoid logit by exactly beta") {
  Rng rng(39);
  Raam r = Raam::make(8, rng);
  Tensor x = randn({2, 8, 4, 4}, rng);
  Tensor avg = ag::global_avgpool(x), mx = ag::global_maxpool(x);
  Tensor base = r.gate_logits(avg, mx);
  Rng rb(40);
  for (int i = 0; i < 8; ++i) r.beta.data()[i] = rb.uniform(-2.0, 2.0);
  Tensor shifted = r.gate_logits(avg, mx);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 8; ++c)
      CHECK(shifted.at({n, c}) == base.at({n, c}) + r.beta.data()[c]);
}

TEST_CASE("raam: channel-constant input matches the two-path oracle") {
  Rng rng(41);
  Raam r = Raam::make(6, rng);
  Rng rb(42);
  for (int i = 0; i < 6; ++i) r.beta.data()[i] = rb.uniform(-1.0, 1.0);
  // per-channel constant tensor: GAP = GMP = v
  Tensor x = Tensor::zeros({1, 6, 3, 3});
  Tensor v = Tensor::zeros({1, 6});
  for (int c = 0; c < 6; ++c) {
    const double val = rb.uniform(-1.0, 1.0);
    v.at({0, c}) = val;
    for (int i = 0; i < 9; ++i) x.data()[c * 9 + i] = val;
  }
  Tensor logit = r.gate_logits(ag::global_avgpool(x), ag::global_maxpool(x));
  // independent evaluation: 2*FC(v) + beta
  Tensor fc = ag::linear(ag::silu(ag::linear(v, r.w1, r.b1)), r.w2, r.b2);
  for (int c = 0; c < 6; ++c) {
    const double expect = 2.0 * fc.at({0, c}) + r.beta.data()[c];
    CHECK(std::abs(logit.at({0, c}) - expect) <= 1e-12);
  }
}

TEST_CASE("raam: gate lies strictly in (0,1) and never amplifies") {
  Rng rng(43);
  Raam r = Raam::make(8, rng);
  Tensor x = randn({2, 8, 6, 6}, rng, 2.0);
  Tensor gate = ag::sigmoid(
      r.gate_logits(ag::global_avgpool(x), ag::global_maxpool(x)));
  for (int64_t i = 0; i < gate.numel(); ++i) {
    CHECK(gate.data()[i] > 0.0);
    CHECK(gate.data()[i] < 1.0);
  }
  Tensor y = r.forward(x, false);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(std::abs(y.data()[i]) <= std::abs(x.data()[i]));
}

TEST_CASE("raam: channel mismatch rejected") {
  Rng rng(44);
  Raam r = Raam::make(8, rng);
  Tensor x = Tensor::zeros({1, 6, 4, 4});
  CHECK_THROWS_AS(r.forward(x, false), ShapeError);
}

TEST_CASE("raam: gradcheck") {
  Rng rng(45);
  Raam r = Raam::make(6, rng);
  Tensor x = randn({2, 6, 4, 4}, rng);
  auto f = [&]() { return r.forward(x, true); };
  auto res = gradcheck::check(f, {x, r.w1, r.b1, r.w2, r.b2, r.beta}, 46);
  CHECK(res.max_rel_err < gradcheck::kTol);
}

TEST_CASE("dsconv: gradcheck through both stages") {
  Rng rng(47);
  DsConv d = DsConv::make(4, 6, 2, rng);
  Tensor x = randn({2, 4, 6, 6}, rng);
  std::vector<Tensor> params = {x};
  d.visit("d", [&](const std::string&, Tensor& t, bool buffer) {
    if (!buffer) params.push_back(t);
  });
  auto bufs = block_buffers([&](const TensorVisit& v) { d.visit("d", v); });
  auto f = restoring(bufs, [&]() { return d.forward(x, true); });
  auto res = gradcheck::check(f, params, 48);
  CHECK(res.max_rel_err < gradcheck::kTol);
}

TEST_CASE("blocks: closed-form parameter counts match tensor enumeration") {
  Rng rng(49);
  auto enumerated = [](const std::function<void(const TensorVisit&)>& visit) {
    int64_t n = 0;
    visit([&](const std::string&, Tensor& t, bool buffer) {
      if (!buffer) n += t.numel();
    });
    return n;
  };
  ConvBnSilu c = ConvBnSilu::make(6, 10, 3, 1, 1, rng);
  CHECK(c.param_count() ==
        enumerated([&](const TensorVisit& v) { c.visit("x", v); }));
  DsConv d = DsConv::make(6, 10, 1, rng);
  CHECK(d.param_count() ==
        enumerated([&](const TensorVisit& v) { d.visit("x", v); }));
  GhostConv g = GhostConv::make(6, 10, rng);
  CHECK(g.param_count() ==
        enumerated([&](const TensorVisit& v) { g.visit("x", v); }));
  for (bool dw : {false, true}) {
    C3k2 b = C3k2::make(6, 10, dw, rng);
    CHECK(b.param_count() ==
          enumerated([&](const TensorVisit& v) { b.visit("x", v); }));
  }
  Sppf s = Sppf::make(6, 10, rng);
  CHECK(s.param_count() ==
        enumerated([&](const TensorVisit& v) { s.visit("x", v); }));
  C2PsaLite p = C2PsaLite::make(6, 10, 9, rng);
  CHECK(p.param_count() ==
        enumerated([&](const TensorVisit& v) { p.visit("x", v); }));
  Raam r = Raam::make(8, rng);
  CHECK(r.param_count() ==
        enumerated([&](const TensorVisit& v) { r.visit("x", v); }));
}
