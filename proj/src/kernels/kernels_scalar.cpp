// ===== Scalar reference kernels =====
//
// These define the numeric semantics every other backend must reproduce
// bitwise. Per output element the accumulation order is (ci, ky, kx) for the
// forward pass and (co, ky, kx) for the input gradient. The weight-gradient
// reduction uses a 4-lane striped accumulator (lane = position-in-row mod 4,
// combined as (l0+l1)+(l2+l3)); the striping mirrors the vector backend so
// both produce identical bits.

#include "ripeloc/kernels.hpp"

namespace ripeloc::kern {

namespace {

void conv2d_fwd_scalar(const ConvShape& s, const double* x, const double* w,
                       double* out) {
  const int cin_g = s.cin / s.groups, cout_g = s.cout / s.groups;
  const int64_t xs_c = int64_t(s.hin) * s.win;
  const int64_t os_c = int64_t(s.hout) * s.wout;
  const int64_t ws_co = int64_t(cin_g) * s.k * s.k;
  for (int n = 0; n < s.n; ++n)
    for (int g = 0; g < s.groups; ++g)
      for (int co = g * cout_g; co < (g + 1) * cout_g; ++co) {
        double* o = out + (int64_t(n) * s.cout + co) * os_c;
        const double* wco = w + co * ws_co;
        for (int cil = 0; cil < cin_g; ++cil) {
          const int ci = g * cin_g + cil;
          const double* xin = x + (int64_t(n) * s.cin + ci) * xs_c;
          const double* wk = wco + int64_t(cil) * s.k * s.k;
          for (int ky = 0; ky < s.k; ++ky) {
            int oy0, oy1;
            tap_range(ky, s.pad, s.stride, s.hin, s.hout, oy0, oy1);
            for (int kx = 0; kx < s.k; ++kx) {
              const double wv = wk[ky * s.k + kx];
              int ox0, ox1;
              tap_range(kx, s.pad, s.stride, s.win, s.wout, ox0, ox1);
              for (int oy = oy0; oy < oy1; ++oy) {
                const double* xr =
                    xin + int64_t(oy * s.stride + ky - s.pad) * s.win +
                    (kx - s.pad);
                double* orow = o + int64_t(oy) * s.wout;
                for (int ox = ox0; ox < ox1; ++ox)
                  orow[ox] += wv * xr[int64_t(ox) * s.stride];
              }
            }
          }
        }
      }
}

void conv2d_dinput_scalar(const ConvShape& s, const double* w,
                          const double* dy, double* dx) {
  const int cin_g = s.cin / s.groups, cout_g = s.cout / s.groups;
  const int64_t xs_c = int64_t(s.hin) * s.win;
  const int64_t os_c = int64_t(s.hout) * s.wout;
  const int64_t ws_co = int64_t(cin_g) * s.k * s.k;
  for (int n = 0; n < s.n; ++n)
    for (int g = 0; g < s.groups; ++g)
      for (int cil = 0; cil < cin_g; ++cil) {
        const int ci = g * cin_g + cil;
        double* dxin = dx + (int64_t(n) * s.cin + ci) * xs_c;
        for (int co = g * cout_g; co < (g + 1) * cout_g; ++co) {
          const double* dyo = dy + (int64_t(n) * s.cout + co) * os_c;
          const double* wk = w + co * ws_co + int64_t(cil) * s.k * s.k;
          for (int ky = 0; ky < s.k; ++ky) {
            int oy0, oy1;
            tap_range(ky, s.pad, s.stride, s.hin, s.hout, oy0, oy1);
            for (int kx = 0; kx < s.k; ++kx) {
              const double wv = wk[ky * s.k + kx];
              int ox0, ox1;
              tap_range(kx, s.pad, s.stride, s.win, s.wout, ox0, ox1);
              for (int oy = oy0; oy < oy1; ++oy) {
                double* dxr = dxin +
                              int64_t(oy * s.stride + ky - s.pad) * s.win +
                              (kx - s.pad);
                const double* dyr = dyo + int64_t(oy) * s.wout;
                for (int ox = ox0; ox < ox1; ++ox)
                  dxr[int64_t(ox) * s.stride] += wv * dyr[ox];
              }
            }
          }
        }
      }
}

void conv2d_dweight_scalar(const ConvShape& s, const double* x,
                           const double* dy, double* dw) {
  const int cin_g = s.cin / s.groups, cout_g = s.cout / s.groups;
  const int64_t xs_c = int64_t(s.hin) * s.win;
  const int64_t os_c = int64_t(s.hout) * s.wout;
  const int64_t ws_co = int64_t(cin_g) * s.k * s.k;
  for (int g = 0; g < s.groups; ++g)
    for (int co = g * cout_g; co < (g + 1) * cout_g; ++co)
      for (int cil = 0; cil < cin_g; ++cil) {
        const int ci = g * cin_g + cil;
        double* dwk = dw + co * ws_co + int64_t(cil) * s.k * s.k;
        for (int ky = 0; ky < s.k; ++ky) {
          int oy0, oy1;
          tap_range(ky, s.pad, s.stride, s.hin, s.hout, oy0, oy1);
          for (int kx = 0; kx < s.k; ++kx) {
            int ox0, ox1;
            tap_range(kx, s.pad, s.stride, s.win, s.wout, ox0, ox1);
            // 4-lane striped accumulation; lane index restarts at each row.
            double acc[4] = {0.0, 0.0, 0.0, 0.0};
            for (int n = 0; n < s.n; ++n) {
              const double* xin = x + (int64_t(n) * s.cin + ci) * xs_c;
              const double* dyo = dy + (int64_t(n) * s.cout + co) * os_c;
              for (int oy = oy0; oy < oy1; ++oy) {
                const double* xr =
                    xin + int64_t(oy * s.stride + ky - s.pad) * s.win +
                    (kx - s.pad);
                const double* dyr = dyo + int64_t(oy) * s.wout;
                for (int ox = ox0; ox < ox1; ++ox)
                  acc[(ox - ox0) & 3] += dyr[ox] * xr[int64_t(ox) * s.stride];
              }
            }
            dwk[ky * s.k + kx] += (acc[0] + acc[1]) + (acc[2] + acc[3]);
          }
        }
      }
}

void sgd_update_scalar(double* p, double* v, const double* g, double lr,
                       double momentum, double wd, int64_t len) {
  for (int64_t i = 0; i < len; ++i) {
    v[i] = momentum * v[i] + g[i] + wd * p[i];
    p[i] -= lr * v[i];
  }
}

const KernelTable g_scalar{"scalar", conv2d_fwd_scalar, conv2d_dinput_scalar,
                           conv2d_dweight_scalar, sgd_update_scalar};

}  // namespace

const KernelTable* scalar_table() { return &g_scalar; }

}  // namespace ripeloc::kern
