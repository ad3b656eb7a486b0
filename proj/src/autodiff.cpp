// ===== Autodiff op implementations =====
//
// Every op validates shapes up front and throws ShapeError with full
// diagnostics. Forward computation is eager; when recording, a closure node
// capturing the involved tensors is pushed onto the tape. Gradient buffers
// are accumulated with += everywhere, never overwritten.

#include "ripeloc/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>

#include "ripeloc/kernels.hpp"

namespace ripeloc::ag {

namespace {

struct Node {
  Tensor out;
  std::function<void()> fn;
};

std::vector<Node> g_tape;
bool g_recording = false;

void record(const Tensor& out, std::function<void()> fn) {
  const_cast<Tensor&>(out).mark_from_op();
  g_tape.push_back(Node{out, std::move(fn)});
}

void need_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void need_ndim(const Tensor& x, int nd, const char* op) {
  if (x.ndim() != nd)
    throw ShapeError(std::string(op) + ": expected " + std::to_string(nd) +
                     "-d tensor, got " + shape_str(x.shape()));
}

double sigm(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Generic elementwise binary op helper.
template <class Fwd, class Bwd>
Tensor ew_binary(const Tensor& a, const Tensor& b, const char* name, Fwd f,
                 Bwd bw) {
  need_same(a, b, name);
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
  if (g_recording && (a.grad_needed() || b.grad_needed())) {
    Tensor ac = a, bc = b, oc = out;
    record(out, [ac, bc, oc, bw]() mutable {
      const double* g = oc.grad();
      const double* pa2 = ac.data();
      const double* pb2 = bc.data();
      double* ga = ac.grad_needed() ? ac.grad() : nullptr;
      double* gb = bc.grad_needed() ? bc.grad() : nullptr;
      const int64_t m = ac.numel();
      for (int64_t i = 0; i < m; ++i) bw(pa2[i], pb2[i], g[i], ga, gb, i);
    });
  }
  return out;
}

template <class Fwd, class Bwd>
Tensor ew_unary(const Tensor& x, const char* /*name*/, Fwd f, Bwd bw) {
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = f(px[i]);
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc, bw]() mutable {
      const double* g = oc.grad();
      const double* px2 = xc.data();
      double* gx = xc.grad();
      const int64_t m = xc.numel();
      for (int64_t i = 0; i < m; ++i) gx[i] += bw(px2[i], g[i]);
    });
  }
  return out;
}

}  // namespace

bool recording() { return g_recording; }
void set_recording(bool on) { g_recording = on; }
size_t tape_size() { return g_tape.size(); }
void clear_tape() { g_tape.clear(); }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss.defined() ? shape_str(loss.shape())
                                     : std::string("<undefined>")));
  // Re-zero intermediate grads so repeated calls accumulate only into leaves.
  for (Node& n : g_tape) n.out.zero_grad();
  const_cast<Tensor&>(loss).grad()[0] = 1.0;
  for (auto it = g_tape.rbegin(); it != g_tape.rend(); ++it) it->fn();
}

// --------------------------------------------------------------------------
// convolution

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad, int groups) {
  need_ndim(x, 4, "conv2d(x)");
  need_ndim(w, 4, "conv2d(w)");
  const int n = x.dim(0), cin = x.dim(1), hin = x.dim(2), win = x.dim(3);
  const int cout = w.dim(0), k = w.dim(2);
  if (groups < 1 || cin % groups != 0 || cout % groups != 0)
    throw ShapeError("conv2d: groups " + std::to_string(groups) +
                     " must divide cin " + std::to_string(cin) + " and cout " +
                     std::to_string(cout));
  if (w.dim(1) != cin / groups || w.dim(3) != k)
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) +
                     " incompatible with input " + shape_str(x.shape()) +
                     " groups " + std::to_string(groups));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != cout))
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) +
                     " vs cout " + std::to_string(cout));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const int hout = (hin + 2 * pad - k) / stride + 1;
  const int wout = (win + 2 * pad - k) / stride + 1;
  if (hout <= 0 || wout <= 0)
    throw ShapeError("conv2d: empty output for input " + shape_str(x.shape()) +
                     " k=" + std::to_string(k) + " s=" + std::to_string(stride) +
                     " p=" + std::to_string(pad));

  kern::ConvShape cs{n, cin, hin, win, cout, k, stride, pad, groups, hout, wout};
  Tensor out = Tensor::zeros({n, cout, hout, wout});
  if (bias.defined()) {
    double* po = out.data();
    const double* pb = bias.data();
    const int64_t hw = int64_t(hout) * wout;
    for (int ni = 0; ni < n; ++ni)
      for (int c = 0; c < cout; ++c) {
        double* row = po + (int64_t(ni) * cout + c) * hw;
        for (int64_t i = 0; i < hw; ++i) row[i] = pb[c];
      }
  }
  kern::kernels().conv2d_fwd(cs, x.data(), w.data(), out.data());

  if (g_recording &&
      (x.grad_needed() || w.grad_needed() ||
       (bias.defined() && bias.grad_needed()))) {
    Tensor xc = x, wc = w, bc = bias, oc = out;
    record(out, [xc, wc, bc, oc, cs]() mutable {
      const double* dy = oc.grad();
      if (xc.grad_needed())
        kern::kernels().conv2d_dinput(cs, wc.data(), dy, xc.grad());
      if (wc.grad_needed())
        kern::kernels().conv2d_dweight(cs, xc.data(), dy, wc.grad());
      if (bc.defined() && bc.grad_needed()) {
        double* db = bc.grad();
        const int64_t hw = int64_t(cs.hout) * cs.wout;
        for (int ni = 0; ni < cs.n; ++ni)
          for (int c = 0; c < cs.cout; ++c) {
            const double* row = dy + (int64_t(ni) * cs.cout + c) * hw;
            double s = 0.0;
            for (int64_t i = 0; i < hw; ++i) s += row[i];
            db[c] += s;
          }
      }
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// batch normalization

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor run_mean, Tensor run_var, bool training,
                 double momentum, double eps) {
  need_ndim(x, 4, "batchnorm");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Tensor* perchan[] = {&gamma, &beta, &run_mean, &run_var};
  for (const Tensor* t : perchan)
    if (t->ndim() != 1 || t->dim(0) != c)
      throw ShapeError("batchnorm: per-channel tensor " +
                       shape_str(t->shape()) + " vs C=" + std::to_string(c));
  const int64_t hw = int64_t(h) * w;
  const int64_t m = int64_t(n) * hw;
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();

  if (training) {
    // Two-pass biased batch statistics (divisor N*H*W), used both for
    // normalization and for the running-average update.
    std::vector<double> mean(static_cast<size_t>(c), 0.0);
    std::vector<double> invstd(static_cast<size_t>(c), 0.0);
    for (int ci = 0; ci < c; ++ci) {
      double s = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const double* row = px + (int64_t(ni) * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) s += row[i];
      }
      mean[size_t(ci)] = s / double(m);
    }
    std::vector<double> var(static_cast<size_t>(c), 0.0);
    for (int ci = 0; ci < c; ++ci) {
      double s = 0.0;
      const double mu = mean[size_t(ci)];
      for (int ni = 0; ni < n; ++ni) {
        const double* row = px + (int64_t(ni) * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const double d = row[i] - mu;
          s += d * d;
        }
      }
      var[size_t(ci)] = s / double(m);
      invstd[size_t(ci)] = 1.0 / std::sqrt(var[size_t(ci)] + eps);
    }
    double* rm = run_mean.data();
    double* rv = run_var.data();
    for (int ci = 0; ci < c; ++ci) {
      rm[ci] = (1.0 - momentum) * rm[ci] + momentum * mean[size_t(ci)];
      rv[ci] = (1.0 - momentum) * rv[ci] + momentum * var[size_t(ci)];
    }
    for (int ni = 0; ni < n; ++ni)
      for (int ci = 0; ci < c; ++ci) {
        const double* row = px + (int64_t(ni) * c + ci) * hw;
        double* orow = po + (int64_t(ni) * c + ci) * hw;
        const double mu = mean[size_t(ci)], is = invstd[size_t(ci)];
        const double ga = pg[ci], be = pb[ci];
        for (int64_t i = 0; i < hw; ++i)
          orow[i] = ga * ((row[i] - mu) * is) + be;
      }

    if (g_recording &&
        (x.grad_needed() || gamma.grad_needed() || beta.grad_needed())) {
      Tensor xc = x, gc = gamma, bc = beta, oc = out;
      record(out, [xc, gc, bc, oc, mean, invstd, n, c, hw, m]() mutable {
        const double* g = oc.grad();
        const double* px2 = xc.data();
        const double* pg2 = gc.data();
        double* dga = gc.grad_needed() ? gc.grad() : nullptr;
        double* dbe = bc.grad_needed() ? bc.grad() : nullptr;
        double* dx = xc.grad_needed() ? xc.grad() : nullptr;
        for (int ci = 0; ci < c; ++ci) {
          const double mu = mean[size_t(ci)], is = invstd[size_t(ci)];
          double sg = 0.0, sgx = 0.0;
          for (int ni = 0; ni < n; ++ni) {
            const double* grow = g + (int64_t(ni) * c + ci) * hw;
            const double* xrow = px2 + (int64_t(ni) * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              sg += grow[i];
              sgx += grow[i] * ((xrow[i] - mu) * is);
            }
          }
          if (dbe != nullptr) dbe[ci] += sg;
          if (dga != nullptr) dga[ci] += sgx;
          if (dx != nullptr) {
            const double a = pg2[ci] * is;
            const double c1 = sg / double(m), c2 = sgx / double(m);
            for (int ni = 0; ni < n; ++ni) {
              const double* grow = g + (int64_t(ni) * c + ci) * hw;
              const double* xrow = px2 + (int64_t(ni) * c + ci) * hw;
              double* dxrow = dx + (int64_t(ni) * c + ci) * hw;
              for (int64_t i = 0; i < hw; ++i) {
                const double xh = (xrow[i] - mu) * is;
                dxrow[i] += a * (grow[i] - c1 - xh * c2);
              }
            }
          }
        }
      });
    }
    return out;
  }

  // Eval mode: pure per-channel affine using running statistics.
  const double* rm = run_mean.data();
  const double* rv = run_var.data();
  std::vector<double> scale(static_cast<size_t>(c));
  std::vector<double> shift(static_cast<size_t>(c));
  std::vector<double> invstd(static_cast<size_t>(c));
  for (int ci = 0; ci < c; ++ci) {
    invstd[size_t(ci)] = 1.0 / std::sqrt(rv[ci] + eps);
    scale[size_t(ci)] = pg[ci] * invstd[size_t(ci)];
    shift[size_t(ci)] = pb[ci] - rm[ci] * scale[size_t(ci)];
  }
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const double* row = px + (int64_t(ni) * c + ci) * hw;
      double* orow = po + (int64_t(ni) * c + ci) * hw;
      const double a = scale[size_t(ci)], b = shift[size_t(ci)];
      for (int64_t i = 0; i < hw; ++i) orow[i] = a * row[i] + b;
    }
  if (g_recording &&
      (x.grad_needed() || gamma.grad_needed() || beta.grad_needed())) {
    Tensor xc = x, gc = gamma, bc = beta, oc = out, rmc = run_mean;
    record(out, [xc, gc, bc, oc, rmc, scale, invstd, n, c, hw]() mutable {
      const double* g = oc.grad();
      const double* px2 = xc.data();
      const double* rm2 = rmc.data();
      double* dga = gc.grad_needed() ? gc.grad() : nullptr;
      double* dbe = bc.grad_needed() ? bc.grad() : nullptr;
      double* dx = xc.grad_needed() ? xc.grad() : nullptr;
      for (int ci = 0; ci < c; ++ci) {
        double sg = 0.0, sgx = 0.0;
        for (int ni = 0; ni < n; ++ni) {
          const double* grow = g + (int64_t(ni) * c + ci) * hw;
          const double* xrow = px2 + (int64_t(ni) * c + ci) * hw;
          double* dxrow = dx != nullptr ? dx + (int64_t(ni) * c + ci) * hw
                                        : nullptr;
          for (int64_t i = 0; i < hw; ++i) {
            sg += grow[i];
            sgx += grow[i] * ((xrow[i] - rm2[ci]) * invstd[size_t(ci)]);
            if (dxrow != nullptr) dxrow[i] += scale[size_t(ci)] * grow[i];
          }
        }
        if (dbe != nullptr) dbe[ci] += sg;
        if (dga != nullptr) dga[ci] += sgx;
      }
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// pooling / upsampling

Tensor maxpool(const Tensor& x, int k, int stride, int pad) {
  need_ndim(x, 4, "maxpool");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0 || pad >= k)
    throw ShapeError("maxpool: bad geometry for " + shape_str(x.shape()));
  Tensor out = Tensor::zeros({n, c, ho, wo});
  std::vector<int32_t> arg(static_cast<size_t>(out.numel()));
  const double* px = x.data();
  double* po = out.data();
  int64_t oi = 0;
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const double* plane = px + (int64_t(ni) * c + ci) * h * w;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          int32_t bi = -1;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= w) continue;
              const double v = plane[int64_t(iy) * w + ix];
              if (v > best) {  // strict: ties keep the first (scan order)
                best = v;
                bi = int32_t(iy * w + ix);
              }
            }
          }
          po[oi] = best;
          arg[size_t(oi)] = bi;
        }
    }
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc, arg, n, c, h, w]() mutable {
      const double* g = oc.grad();
      double* dx = xc.grad();
      const int64_t hw = int64_t(h) * w;
      const int64_t ohw = oc.numel() / (int64_t(n) * c);
      int64_t oi = 0;
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
          double* dplane = dx + (int64_t(ni) * c + ci) * hw;
          for (int64_t i = 0; i < ohw; ++i, ++oi)
            dplane[arg[size_t(oi)]] += g[oi];
        }
    });
  }
  return out;
}

Tensor global_avgpool(const Tensor& x) {
  need_ndim(x, 4, "global_avgpool");
  const int n = x.dim(0), c = x.dim(1);
  const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  Tensor out = Tensor::zeros({n, c});
  const double* px = x.data();
  double* po = out.data();
  for (int64_t nc = 0; nc < int64_t(n) * c; ++nc) {
    const double* row = px + nc * hw;
    double s = 0.0;
    for (int64_t i = 0; i < hw; ++i) s += row[i];
    po[nc] = s / double(hw);
  }
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc, n, c, hw]() mutable {
      const double* g = oc.grad();
      double* dx = xc.grad();
      for (int64_t nc = 0; nc < int64_t(n) * c; ++nc) {
        const double gv = g[nc] / double(hw);
        double* row = dx + nc * hw;
        for (int64_t i = 0; i < hw; ++i) row[i] += gv;
      }
    });
  }
  return out;
}

Tensor global_maxpool(const Tensor& x) {
  need_ndim(x, 4, "global_maxpool");
  const int n = x.dim(0), c = x.dim(1);
  const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  Tensor out = Tensor::zeros({n, c});
  std::vector<int64_t> arg(static_cast<size_t>(out.numel()));
  const double* px = x.data();
  double* po = out.data();
  for (int64_t nc = 0; nc < int64_t(n) * c; ++nc) {
    const double* row = px + nc * hw;
    double best = row[0];
    int64_t bi = 0;
    for (int64_t i = 1; i < hw; ++i)
      if (row[i] > best) {
        best = row[i];
        bi = i;
      }
    po[nc] = best;
    arg[size_t(nc)] = bi;
  }
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc, arg, n, c, hw]() mutable {
      const double* g = oc.grad();
      double* dx = xc.grad();
      for (int64_t nc = 0; nc < int64_t(n) * c; ++nc)
        dx[nc * hw + arg[size_t(nc)]] += g[nc];
    });
  }
  return out;
}

Tensor upsample2(const Tensor& x) {
  need_ndim(x, 4, "upsample2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out = Tensor::zeros({n, c, 2 * h, 2 * w});
  const double* px = x.data();
  double* po = out.data();
  for (int64_t nc = 0; nc < int64_t(n) * c; ++nc) {
    const double* pl = px + nc * h * w;
    double* ol = po + nc * 4 * h * w;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const double v = pl[int64_t(y) * w + xx];
        double* o0 = ol + int64_t(2 * y) * 2 * w + 2 * xx;
        o0[0] = v;
        o0[1] = v;
        o0[2 * w] = v;
        o0[2 * w + 1] = v;
      }
  }
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc, n, c, h, w]() mutable {
      const double* g = oc.grad();
      double* dx = xc.grad();
      for (int64_t nc = 0; nc < int64_t(n) * c; ++nc) {
        double* dl = dx + nc * h * w;
        const double* gl = g + nc * 4 * h * w;
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            const double* g0 = gl + int64_t(2 * y) * 2 * w + 2 * xx;
            dl[int64_t(y) * w + xx] +=
                (g0[0] + g0[1]) + (g0[2 * w] + g0[2 * w + 1]);
          }
      }
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// activations / elementwise

Tensor silu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> sig(static_cast<size_t>(x.numel()));
  const double* px = x.data();
  double* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    sig[size_t(i)] = sigm(px[i]);
    po[i] = px[i] * sig[size_t(i)];
  }
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc, sig = std::move(sig)]() mutable {
      const double* g = oc.grad();
      const double* px2 = xc.data();
      double* gx = xc.grad();
      for (int64_t i = 0; i < xc.numel(); ++i) {
        const double s = sig[size_t(i)];
        gx[i] += g[i] * (s * (1.0 + px2[i] * (1.0 - s)));
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  return ew_unary(
      x, "sigmoid", [](double v) { return sigm(v); },
      [](double v, double g) {
        const double s = sigm(v);
        return g * s * (1.0 - s);
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return ew_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g, double* ga, double* gb, int64_t i) {
        if (ga != nullptr) ga[i] += g;
        if (gb != nullptr) gb[i] += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return ew_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g, double* ga, double* gb, int64_t i) {
        if (ga != nullptr) ga[i] += g;
        if (gb != nullptr) gb[i] -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return ew_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double g, double* ga, double* gb, int64_t i) {
        if (ga != nullptr) ga[i] += g * y;
        if (gb != nullptr) gb[i] += g * x;
      });
}

Tensor divt(const Tensor& a, const Tensor& b) {
  return ew_binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double x, double y, double g, double* ga, double* gb, int64_t i) {
        if (ga != nullptr) ga[i] += g / y;
        if (gb != nullptr) gb[i] -= g * x / (y * y);
      });
}

Tensor min2(const Tensor& a, const Tensor& b) {
  return ew_binary(
      a, b, "min", [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double g, double* ga, double* gb, int64_t i) {
        if (x <= y) {
          if (ga != nullptr) ga[i] += g;
        } else if (gb != nullptr) {
          gb[i] += g;
        }
      });
}

Tensor max2(const Tensor& a, const Tensor& b) {
  return ew_binary(
      a, b, "max", [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double g, double* ga, double* gb, int64_t i) {
        if (x >= y) {
          if (ga != nullptr) ga[i] += g;
        } else if (gb != nullptr) {
          gb[i] += g;
        }
      });
}

Tensor affine(const Tensor& x, double a, double b) {
  return ew_unary(
      x, "affine", [a, b](double v) { return a * v + b; },
      [a](double, double g) { return g * a; });
}

Tensor square(const Tensor& x) {
  return ew_unary(
      x, "square", [](double v) { return v * v; },
      [](double v, double g) { return g * 2.0 * v; });
}

Tensor sqrt_t(const Tensor& x) {
  return ew_unary(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double v, double g) { return g * 0.5 / std::sqrt(v); });
}

Tensor log_t(const Tensor& x) {
  return ew_unary(
      x, "log", [](double v) { return std::log(v); },
      [](double v, double g) { return g / v; });
}

Tensor atan_t(const Tensor& x) {
  return ew_unary(
      x, "atan", [](double v) { return std::atan(v); },
      [](double v, double g) { return g / (1.0 + v * v); });
}

Tensor clampv(const Tensor& x, double lo, double hi) {
  return ew_unary(
      x, "clamp", [lo, hi](double v) { return clampd(v, lo, hi); },
      [lo, hi](double v, double g) {
        return (v > lo && v < hi) ? g : 0.0;  // boundary passes no gradient
      });
}

// --------------------------------------------------------------------------
// shape ops

Tensor concat_c(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_c: empty input list");
  need_ndim(xs[0], 4, "concat_c");
  const int n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int ctot = 0;
  for (const Tensor& t : xs) {
    need_ndim(t, 4, "concat_c");
    if (t.dim(0) != n || t.dim(2) != h || t.dim(3) != w)
      throw ShapeError("concat_c: mismatched member " + shape_str(t.shape()) +
                       " vs " + shape_str(xs[0].shape()));
    ctot += t.dim(1);
  }
  Tensor out = Tensor::zeros({n, ctot, h, w});
  const int64_t hw = int64_t(h) * w;
  double* po = out.data();
  int coff = 0;
  for (const Tensor& t : xs) {
    const int tc = t.dim(1);
    const double* pt = t.data();
    for (int ni = 0; ni < n; ++ni)
      std::memcpy(po + (int64_t(ni) * ctot + coff) * hw,
                  pt + int64_t(ni) * tc * hw,
                  size_t(tc * hw) * sizeof(double));
    coff += tc;
  }
  bool any = false;
  for (const Tensor& t : xs) any = any || t.grad_needed();
  if (g_recording && any) {
    std::vector<Tensor> xc = xs;
    Tensor oc = out;
    record(out, [xc, oc, n, ctot, hw]() mutable {
      const double* g = oc.grad();
      int coff2 = 0;
      for (Tensor& t : xc) {
        const int tc = t.dim(1);
        if (t.grad_needed()) {
          double* gt = t.grad();
          for (int ni = 0; ni < n; ++ni) {
            const double* gs = g + (int64_t(ni) * ctot + coff2) * hw;
            double* gd = gt + int64_t(ni) * tc * hw;
            for (int64_t i = 0; i < tc * hw; ++i) gd[i] += gs[i];
          }
        }
        coff2 += tc;
      }
    });
  }
  return out;
}

Tensor slice_c(const Tensor& x, int c0, int c1) {
  need_ndim(x, 4, "slice_c");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c0 < 0 || c1 > c || c0 >= c1)
    throw ShapeError("slice_c: range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") on C=" + std::to_string(c));
  const int sc = c1 - c0;
  const int64_t hw = int64_t(h) * w;
  Tensor out = Tensor::zeros({n, sc, h, w});
  for (int ni = 0; ni < n; ++ni)
    std::memcpy(out.data() + int64_t(ni) * sc * hw,
                x.data() + (int64_t(ni) * c + c0) * hw,
                size_t(sc * hw) * sizeof(double));
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc, n, c, c0, sc, hw]() mutable {
      const double* g = oc.grad();
      double* gx = xc.grad();
      for (int ni = 0; ni < n; ++ni) {
        const double* gs = g + int64_t(ni) * sc * hw;
        double* gd = gx + (int64_t(ni) * c + c0) * hw;
        for (int64_t i = 0; i < sc * hw; ++i) gd[i] += gs[i];
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_rows: empty input list");
  Shape rest(xs[0].shape().begin() + 1, xs[0].shape().end());
  int64_t rows = 0;
  for (const Tensor& t : xs) {
    Shape r(t.shape().begin() + 1, t.shape().end());
    if (r != rest)
      throw ShapeError("concat_rows: trailing dims differ: " +
                       shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
    rows += t.dim(0);
  }
  Shape os = xs[0].shape();
  os[0] = int(rows);
  Tensor out = Tensor::zeros(os);
  int64_t off = 0;
  for (const Tensor& t : xs) {
    std::memcpy(out.data() + off, t.data(), size_t(t.numel()) * sizeof(double));
    off += t.numel();
  }
  bool any = false;
  for (const Tensor& t : xs) any = any || t.grad_needed();
  if (g_recording && any) {
    std::vector<Tensor> xc = xs;
    Tensor oc = out;
    record(out, [xc, oc]() mutable {
      const double* g = oc.grad();
      int64_t off2 = 0;
      for (Tensor& t : xc) {
        if (t.grad_needed()) {
          double* gt = t.grad();
          for (int64_t i = 0; i < t.numel(); ++i) gt[i] += g[off2 + i];
        }
        off2 += t.numel();
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape s) {
  if (shape_numel(s) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " +
                     shape_str(s) + " changes element count");
  Tensor out = Tensor::from_vec(std::move(s), x.vec());
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc]() mutable {
      const double* g = oc.grad();
      double* gx = xc.grad();
      for (int64_t i = 0; i < xc.numel(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor scale_channels(const Tensor& x, const Tensor& gate) {
  need_ndim(x, 4, "scale_channels(x)");
  need_ndim(gate, 2, "scale_channels(gate)");
  const int n = x.dim(0), c = x.dim(1);
  const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  if (gate.dim(0) != n || gate.dim(1) != c)
    throw ShapeError("scale_channels: gate " + shape_str(gate.shape()) +
                     " vs x " + shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  const double* pg = gate.data();
  double* po = out.data();
  for (int64_t nc = 0; nc < int64_t(n) * c; ++nc) {
    const double gv = pg[nc];
    const double* row = px + nc * hw;
    double* orow = po + nc * hw;
    for (int64_t i = 0; i < hw; ++i) orow[i] = row[i] * gv;
  }
  if (g_recording && (x.grad_needed() || gate.grad_needed())) {
    Tensor xc = x, gc = gate, oc = out;
    record(out, [xc, gc, oc, n, c, hw]() mutable {
      const double* g = oc.grad();
      const double* px2 = xc.data();
      const double* pg2 = gc.data();
      double* dx = xc.grad_needed() ? xc.grad() : nullptr;
      double* dg = gc.grad_needed() ? gc.grad() : nullptr;
      for (int64_t nc = 0; nc < int64_t(n) * c; ++nc) {
        const double* grow = g + nc * hw;
        const double* xrow = px2 + nc * hw;
        if (dx != nullptr) {
          double* dxrow = dx + nc * hw;
          const double gv = pg2[nc];
          for (int64_t i = 0; i < hw; ++i) dxrow[i] += grow[i] * gv;
        }
        if (dg != nullptr) {
          double s = 0.0;
          for (int64_t i = 0; i < hw; ++i) s += grow[i] * xrow[i];
          dg[nc] += s;
        }
      }
    });
  }
  return out;
}

Tensor tokens_from_spatial(const Tensor& x) {
  need_ndim(x, 4, "tokens_from_spatial");
  const int n = x.dim(0), c = x.dim(1);
  const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  Tensor out = Tensor::zeros({n, int(hw), c});
  const double* px = x.data();
  double* po = out.data();
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const double* row = px + (int64_t(ni) * c + ci) * hw;
      double* obase = po + int64_t(ni) * hw * c + ci;
      for (int64_t t = 0; t < hw; ++t) obase[t * c] = row[t];
    }
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc, n, c, hw]() mutable {
      const double* g = oc.grad();
      double* gx = xc.grad();
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
          double* row = gx + (int64_t(ni) * c + ci) * hw;
          const double* gbase = g + int64_t(ni) * hw * c + ci;
          for (int64_t t = 0; t < hw; ++t) row[t] += gbase[t * c];
        }
    });
  }
  return out;
}

Tensor spatial_from_tokens(const Tensor& x, int h, int w) {
  need_ndim(x, 3, "spatial_from_tokens");
  const int n = x.dim(0), t = x.dim(1), c = x.dim(2);
  if (int64_t(h) * w != t)
    throw ShapeError("spatial_from_tokens: T=" + std::to_string(t) +
                     " vs h*w=" + std::to_string(h * w));
  Tensor out = Tensor::zeros({n, c, h, w});
  const double* px = x.data();
  double* po = out.data();
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      double* row = po + (int64_t(ni) * c + ci) * t;
      const double* xbase = px + int64_t(ni) * t * c + ci;
      for (int64_t ti = 0; ti < t; ++ti) row[ti] = xbase[ti * c];
    }
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc, n, c, t]() mutable {
      const double* g = oc.grad();
      double* gx = xc.grad();
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
          const double* row = g + (int64_t(ni) * c + ci) * t;
          double* xbase = gx + int64_t(ni) * t * c + ci;
          for (int64_t ti = 0; ti < t; ++ti) xbase[ti * c] += row[ti];
        }
    });
  }
  return out;
}

Tensor add_rows(const Tensor& x, const Tensor& pos) {
  need_ndim(x, 3, "add_rows(x)");
  need_ndim(pos, 2, "add_rows(pos)");
  const int n = x.dim(0), t = x.dim(1), c = x.dim(2);
  if (pos.dim(0) != t || pos.dim(1) != c)
    throw ShapeError("add_rows: pos " + shape_str(pos.shape()) + " vs x " +
                     shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  const double* pp = pos.data();
  double* po = out.data();
  const int64_t tc = int64_t(t) * c;
  for (int ni = 0; ni < n; ++ni) {
    const double* xr = px + ni * tc;
    double* orow = po + ni * tc;
    for (int64_t i = 0; i < tc; ++i) orow[i] = xr[i] + pp[i];
  }
  if (g_recording && (x.grad_needed() || pos.grad_needed())) {
    Tensor xc = x, pc = pos, oc = out;
    record(out, [xc, pc, oc, n, tc]() mutable {
      const double* g = oc.grad();
      if (xc.grad_needed()) {
        double* gx = xc.grad();
        for (int64_t i = 0; i < n * tc; ++i) gx[i] += g[i];
      }
      if (pc.grad_needed()) {
        double* gp = pc.grad();
        for (int ni = 0; ni < n; ++ni)
          for (int64_t i = 0; i < tc; ++i) gp[i] += g[ni * tc + i];
      }
    });
  }
  return out;
}

Tensor gather_cells(const Tensor& x,
                    const std::vector<std::array<int, 3>>& nij) {
  need_ndim(x, 4, "gather_cells");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int m = int(nij.size());
  Tensor out = Tensor::zeros({m, c});
  const double* px = x.data();
  double* po = out.data();
  const int64_t hw = int64_t(h) * w;
  for (int mi = 0; mi < m; ++mi) {
    const auto& [ni, i, j] = nij[size_t(mi)];
    if (ni < 0 || ni >= n || i < 0 || i >= h || j < 0 || j >= w)
      throw ShapeError("gather_cells: index out of range");
    const int64_t sp = int64_t(i) * w + j;
    for (int ci = 0; ci < c; ++ci)
      po[int64_t(mi) * c + ci] = px[(int64_t(ni) * c + ci) * hw + sp];
  }
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    auto idx = nij;
    record(out, [xc, oc, idx, c, w, hw]() mutable {
      const double* g = oc.grad();
      double* gx = xc.grad();
      for (size_t mi = 0; mi < idx.size(); ++mi) {
        const auto& [ni, i, j] = idx[mi];
        const int64_t sp = int64_t(i) * w + j;
        for (int ci = 0; ci < c; ++ci)
          gx[(int64_t(ni) * c + ci) * hw + sp] += g[int64_t(mi) * c + ci];
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  need_ndim(x, 2, "slice_cols");
  const int m = x.dim(0), c = x.dim(1);
  if (c0 < 0 || c1 > c || c0 >= c1)
    throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") on C=" + std::to_string(c));
  const int sc = c1 - c0;
  Tensor out = Tensor::zeros({m, sc});
  for (int mi = 0; mi < m; ++mi)
    std::memcpy(out.data() + int64_t(mi) * sc,
                x.data() + int64_t(mi) * c + c0, size_t(sc) * sizeof(double));
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc, m, c, c0, sc]() mutable {
      const double* g = oc.grad();
      double* gx = xc.grad();
      for (int mi = 0; mi < m; ++mi)
        for (int i = 0; i < sc; ++i)
          gx[int64_t(mi) * c + c0 + i] += g[int64_t(mi) * sc + i];
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// linear algebra

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  need_ndim(x, 2, "linear(x)");
  need_ndim(w, 2, "linear(w)");
  const int m = x.dim(0), k = x.dim(1), n = w.dim(0);
  if (w.dim(1) != k)
    throw ShapeError("linear: x " + shape_str(x.shape()) + " vs w " +
                     shape_str(w.shape()));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != n))
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " vs N=" +
                     std::to_string(n));
  Tensor out = Tensor::zeros({m, n});
  const double* px = x.data();
  const double* pw = w.data();
  double* po = out.data();
  for (int mi = 0; mi < m; ++mi)
    for (int ni = 0; ni < n; ++ni) {
      const double* xr = px + int64_t(mi) * k;
      const double* wr = pw + int64_t(ni) * k;
      double s = bias.defined() ? bias.data()[ni] : 0.0;
      for (int ki = 0; ki < k; ++ki) s += xr[ki] * wr[ki];
      po[int64_t(mi) * n + ni] = s;
    }
  if (g_recording &&
      (x.grad_needed() || w.grad_needed() ||
       (bias.defined() && bias.grad_needed()))) {
    Tensor xc = x, wc = w, bc = bias, oc = out;
    record(out, [xc, wc, bc, oc, m, n, k]() mutable {
      const double* g = oc.grad();
      const double* px2 = xc.data();
      const double* pw2 = wc.data();
      if (xc.grad_needed()) {
        double* gx = xc.grad();
        for (int mi = 0; mi < m; ++mi)
          for (int ni = 0; ni < n; ++ni) {
            const double gv = g[int64_t(mi) * n + ni];
            const double* wr = pw2 + int64_t(ni) * k;
            double* gxr = gx + int64_t(mi) * k;
            for (int ki = 0; ki < k; ++ki) gxr[ki] += gv * wr[ki];
          }
      }
      if (wc.grad_needed()) {
        double* gw = wc.grad();
        for (int mi = 0; mi < m; ++mi)
          for (int ni = 0; ni < n; ++ni) {
            const double gv = g[int64_t(mi) * n + ni];
            const double* xr = px2 + int64_t(mi) * k;
            double* gwr = gw + int64_t(ni) * k;
            for (int ki = 0; ki < k; ++ki) gwr[ki] += gv * xr[ki];
          }
      }
      if (bc.defined() && bc.grad_needed()) {
        double* gb = bc.grad();
        for (int mi = 0; mi < m; ++mi)
          for (int ni = 0; ni < n; ++ni) gb[ni] += g[int64_t(mi) * n + ni];
      }
    });
  }
  return out;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  need_ndim(a, 3, "matmul_bt(a)");
  need_ndim(b, 3, "matmul_bt(b)");
  const int bb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  if (b.dim(0) != bb || b.dim(2) != k)
    throw ShapeError("matmul_bt: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor out = Tensor::zeros({bb, m, n});
  for (int bi = 0; bi < bb; ++bi) {
    const double* pa = a.data() + int64_t(bi) * m * k;
    const double* pb = b.data() + int64_t(bi) * n * k;
    double* po = out.data() + int64_t(bi) * m * n;
    for (int mi = 0; mi < m; ++mi)
      for (int ni = 0; ni < n; ++ni) {
        double s = 0.0;
        const double* ar = pa + int64_t(mi) * k;
        const double* br = pb + int64_t(ni) * k;
        for (int ki = 0; ki < k; ++ki) s += ar[ki] * br[ki];
        po[int64_t(mi) * n + ni] = s;
      }
  }
  if (g_recording && (a.grad_needed() || b.grad_needed())) {
    Tensor ac = a, bc = b, oc = out;
    record(out, [ac, bc, oc, bb, m, n, k]() mutable {
      const double* g = oc.grad();
      for (int bi = 0; bi < bb; ++bi) {
        const double* pa = ac.data() + int64_t(bi) * m * k;
        const double* pb = bc.data() + int64_t(bi) * n * k;
        const double* gg = g + int64_t(bi) * m * n;
        if (ac.grad_needed()) {
          double* ga = ac.grad() + int64_t(bi) * m * k;
          for (int mi = 0; mi < m; ++mi)
            for (int ni = 0; ni < n; ++ni) {
              const double gv = gg[int64_t(mi) * n + ni];
              const double* br = pb + int64_t(ni) * k;
              double* gar = ga + int64_t(mi) * k;
              for (int ki = 0; ki < k; ++ki) gar[ki] += gv * br[ki];
            }
        }
        if (bc.grad_needed()) {
          double* gb = bc.grad() + int64_t(bi) * n * k;
          for (int mi = 0; mi < m; ++mi)
            for (int ni = 0; ni < n; ++ni) {
              const double gv = gg[int64_t(mi) * n + ni];
              const double* ar = pa + int64_t(mi) * k;
              double* gbr = gb + int64_t(ni) * k;
              for (int ki = 0; ki < k; ++ki) gbr[ki] += gv * ar[ki];
            }
        }
      }
    });
  }
  return out;
}

Tensor matmul_nn(const Tensor& a, const Tensor& b) {
  need_ndim(a, 3, "matmul_nn(a)");
  need_ndim(b, 3, "matmul_nn(b)");
  const int bb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != bb || b.dim(1) != k)
    throw ShapeError("matmul_nn: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor out = Tensor::zeros({bb, m, n});
  for (int bi = 0; bi < bb; ++bi) {
    const double* pa = a.data() + int64_t(bi) * m * k;
    const double* pb = b.data() + int64_t(bi) * k * n;
    double* po = out.data() + int64_t(bi) * m * n;
    for (int mi = 0; mi < m; ++mi)
      for (int ni = 0; ni < n; ++ni) {
        double s = 0.0;
        for (int ki = 0; ki < k; ++ki)
          s += pa[int64_t(mi) * k + ki] * pb[int64_t(ki) * n + ni];
        po[int64_t(mi) * n + ni] = s;
      }
  }
  if (g_recording && (a.grad_needed() || b.grad_needed())) {
    Tensor ac = a, bc = b, oc = out;
    record(out, [ac, bc, oc, bb, m, n, k]() mutable {
      const double* g = oc.grad();
      for (int bi = 0; bi < bb; ++bi) {
        const double* pa = ac.data() + int64_t(bi) * m * k;
        const double* pb = bc.data() + int64_t(bi) * k * n;
        const double* gg = g + int64_t(bi) * m * n;
        if (ac.grad_needed()) {
          double* ga = ac.grad() + int64_t(bi) * m * k;
          for (int mi = 0; mi < m; ++mi)
            for (int ki = 0; ki < k; ++ki) {
              double s = 0.0;
              for (int ni = 0; ni < n; ++ni)
                s += gg[int64_t(mi) * n + ni] * pb[int64_t(ki) * n + ni];
              ga[int64_t(mi) * k + ki] += s;
            }
        }
        if (bc.grad_needed()) {
          double* gb = bc.grad() + int64_t(bi) * k * n;
          for (int ki = 0; ki < k; ++ki)
            for (int ni = 0; ni < n; ++ni) {
              double s = 0.0;
              for (int mi = 0; mi < m; ++mi)
                s += pa[int64_t(mi) * k + ki] * gg[int64_t(mi) * n + ni];
              gb[int64_t(ki) * n + ni] += s;
            }
        }
      }
    });
  }
  return out;
}

Tensor softmax_last(const Tensor& x) {
  if (x.ndim() < 1) throw ShapeError("softmax_last: scalar input");
  const int b = x.dim(x.ndim() - 1);
  const int64_t rows = x.numel() / b;
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = px + r * b;
    double* orow = po + r * b;
    double mx = xr[0];
    for (int i = 1; i < b; ++i) mx = std::max(mx, xr[i]);
    double s = 0.0;
    for (int i = 0; i < b; ++i) {
      orow[i] = std::exp(xr[i] - mx);
      s += orow[i];
    }
    for (int i = 0; i < b; ++i) orow[i] /= s;
  }
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc, rows, b]() mutable {
      const double* g = oc.grad();
      const double* s = oc.data();
      double* gx = xc.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double* gr = g + r * b;
        const double* sr = s + r * b;
        double dot = 0.0;
        for (int i = 0; i < b; ++i) dot += gr[i] * sr[i];
        double* gxr = gx + r * b;
        for (int i = 0; i < b; ++i) gxr[i] += sr[i] * (gr[i] - dot);
      }
    });
  }
  return out;
}

// --------------------------------------------------------------------------
// reductions / losses

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  const double* px = x.data();
  for (int64_t i = 0; i < x.numel(); ++i) s += px[i];
  Tensor out = Tensor::scalar(s);
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc]() mutable {
      const double g = oc.grad()[0];
      double* gx = xc.grad();
      for (int64_t i = 0; i < xc.numel(); ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  double s = 0.0;
  const double* px = x.data();
  for (int64_t i = 0; i < x.numel(); ++i) s += px[i];
  const double inv = 1.0 / double(x.numel());
  Tensor out = Tensor::scalar(s * inv);
  if (g_recording && x.grad_needed()) {
    Tensor xc = x, oc = out;
    record(out, [xc, oc, inv]() mutable {
      const double g = oc.grad()[0] * inv;
      double* gx = xc.grad();
      for (int64_t i = 0; i < xc.numel(); ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor bce_with_logits(const Tensor& z, const Tensor& t, Reduction r) {
  need_same(z, t, "bce_with_logits");
  const double* pz = z.data();
  const double* pt = t.data();
  double s = 0.0;
  for (int64_t i = 0; i < z.numel(); ++i) {
    const double zi = pz[i];
    s += std::max(zi, 0.0) - zi * pt[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  const double scale = r == Reduction::Mean ? 1.0 / double(z.numel()) : 1.0;
  Tensor out = Tensor::scalar(s * scale);
  if (g_recording && z.grad_needed()) {
    Tensor zc = z, tc = t, oc = out;
    record(out, [zc, tc, oc, scale]() mutable {
      const double g = oc.grad()[0] * scale;
      const double* pz2 = zc.data();
      const double* pt2 = tc.data();
      double* gz = zc.grad();
      for (int64_t i = 0; i < zc.numel(); ++i)
        gz[i] += g * (sigm(pz2[i]) - pt2[i]);
    });
  }
  return out;
}

namespace {
int64_t g_dfl_clamped = 0;
}
int64_t dfl_clamp_count() { return g_dfl_clamped; }
void reset_dfl_clamp_count() { g_dfl_clamped = 0; }

Tensor dfl_loss_mean(const Tensor& logits, const Tensor& target) {
  need_ndim(logits, 3, "dfl_loss_mean(logits)");
  need_ndim(target, 2, "dfl_loss_mean(target)");
  const int m = logits.dim(0), four = logits.dim(1), b = logits.dim(2);
  if (four != 4 || target.dim(0) != m || target.dim(1) != 4)
    throw ShapeError("dfl_loss_mean: logits " + shape_str(logits.shape()) +
                     " vs target " + shape_str(target.shape()));
  const int64_t rows = int64_t(m) * 4;
  const double* pz = logits.data();
  const double* pt = target.data();
  // Per row: cross entropy against the two adjacent-bin weights.
  std::vector<double> logp(static_cast<size_t>(rows) * b);
  double loss = 0.0;
  std::vector<int> lo(static_cast<size_t>(rows));
  std::vector<double> wr(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    double tv = pt[r];
    if (tv < 0.0 || tv > double(b - 1)) {
      ++g_dfl_clamped;
      tv = clampd(tv, 0.0, double(b - 1));
    }
    int li = int(tv);
    if (li > b - 2) li = b - 2;
    lo[size_t(r)] = li;
    wr[size_t(r)] = tv - li;
    const double* zr = pz + r * b;
    double mx = zr[0];
    for (int i = 1; i < b; ++i) mx = std::max(mx, zr[i]);
    double se = 0.0;
    for (int i = 0; i < b; ++i) se += std::exp(zr[i] - mx);
    const double lse = mx + std::log(se);
    double* lpr = logp.data() + r * b;
    for (int i = 0; i < b; ++i) lpr[i] = zr[i] - lse;
    const double wl = 1.0 - wr[size_t(r)];
    loss += -(wl * lpr[li] + wr[size_t(r)] * lpr[li + 1]);
  }
  Tensor out = Tensor::scalar(loss / double(rows));
  if (g_recording && logits.grad_needed()) {
    Tensor zc = logits, oc = out;
    record(out, [zc, oc, logp = std::move(logp), lo = std::move(lo),
                 wr = std::move(wr), rows, b]() mutable {
      const double g = oc.grad()[0] / double(rows);
      double* gz = zc.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double* lpr = logp.data() + r * b;
        double* gzr = gz + r * b;
        const int li = lo[size_t(r)];
        const double wrv = wr[size_t(r)];
        for (int i = 0; i < b; ++i) {
          double p = std::exp(lpr[i]);
          double tgt = (i == li ? 1.0 - wrv : 0.0) + (i == li + 1 ? wrv : 0.0);
          gzr[i] += g * (p - tgt);
        }
      }
    });
  }
  return out;
}

Tensor softmax_expectation(const Tensor& logits) {
  if (logits.ndim() < 2)
    throw ShapeError("softmax_expectation: need >=2-d, got " +
                     shape_str(logits.shape()));
  const int b = logits.dim(logits.ndim() - 1);
  const int64_t rows = logits.numel() / b;
  Shape os(logits.shape().begin(), logits.shape().end() - 1);
  Tensor out = Tensor::zeros(os);
  std::vector<double> probs(static_cast<size_t>(logits.numel()));
  const double* pz = logits.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* zr = pz + r * b;
    double* pr = probs.data() + r * b;
    double mx = zr[0];
    for (int i = 1; i < b; ++i) mx = std::max(mx, zr[i]);
    double s = 0.0;
    for (int i = 0; i < b; ++i) {
      pr[i] = std::exp(zr[i] - mx);
      s += pr[i];
    }
    double e = 0.0;
    for (int i = 0; i < b; ++i) {
      pr[i] /= s;
      e += pr[i] * double(i);
    }
    po[r] = e;
  }
  if (g_recording && logits.grad_needed()) {
    Tensor zc = logits, oc = out;
    record(out, [zc, oc, probs = std::move(probs), rows, b]() mutable {
      const double* g = oc.grad();
      const double* e = oc.data();
      double* gz = zc.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double* pr = probs.data() + r * b;
        double* gzr = gz + r * b;
        for (int i = 0; i < b; ++i)
          gzr[i] += g[r] * pr[i] * (double(i) - e[r]);
      }
    });
  }
  return out;
}

}  // namespace ripeloc::ag
