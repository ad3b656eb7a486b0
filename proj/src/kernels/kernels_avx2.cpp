// ===== AVX2 kernel variant =====
//
// Vector lanes map to independent output elements; each element sees exactly
// the same sequence of mul/add operations as the scalar reference, so results
// are bitwise identical (the TU is compiled without FMA and with
// -ffp-contract=off). The dweight reduction keeps the 4-lane striped
// accumulator in a register and spills it only on rows with a <4 tail, where
// the tail is folded into the correct lane through memory.
//
// This file is built with -mavx2 on x86-64; on other targets it compiles to
// a stub table so the dispatcher can treat "no AVX2" uniformly.

#include "ripeloc/kernels.hpp"

#if defined(__AVX2__)

#include <immintrin.h>

namespace ripeloc::kern {

namespace {

// Extract elements {0,2,4,6} of the 8 doubles starting at p.
// Caller guarantees p[0..7] are readable.
inline __m256d load_even(const double* p) {
  __m256d a = _mm256_loadu_pd(p);
  __m256d b = _mm256_loadu_pd(p + 4);
  return _mm256_permute4x64_pd(_mm256_shuffle_pd(a, b, 0x0), 0xD8);
}

void conv2d_fwd_avx2(const ConvShape& s, const double* x, const double* w,
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
              const __m256d wv4 = _mm256_set1_pd(wv);
              int ox0, ox1;
              tap_range(kx, s.pad, s.stride, s.win, s.wout, ox0, ox1);
              for (int oy = oy0; oy < oy1; ++oy) {
                const double* xr =
                    xin + int64_t(oy * s.stride + ky - s.pad) * s.win +
                    (kx - s.pad);
                double* orow = o + int64_t(oy) * s.wout;
                int ox = ox0;
                if (s.stride == 1) {
                  for (; ox + 4 <= ox1; ox += 4) {
                    __m256d xi = _mm256_loadu_pd(xr + ox);
                    __m256d oo = _mm256_loadu_pd(orow + ox);
                    oo = _mm256_add_pd(oo, _mm256_mul_pd(wv4, xi));
                    _mm256_storeu_pd(orow + ox, oo);
                  }
                } else if (s.stride == 2) {
                  // load_even touches one double past the last used input,
                  // so keep at least one scalar tail element.
                  for (; ox + 5 <= ox1; ox += 4) {
                    __m256d xi = load_even(xr + int64_t(ox) * 2);
                    __m256d oo = _mm256_loadu_pd(orow + ox);
                    oo = _mm256_add_pd(oo, _mm256_mul_pd(wv4, xi));
                    _mm256_storeu_pd(orow + ox, oo);
                  }
                }
                for (; ox < ox1; ++ox)
                  orow[ox] += wv * xr[int64_t(ox) * s.stride];
              }
            }
          }
        }
      }
}

void conv2d_dinput_avx2(const ConvShape& s, const double* w, const double* dy,
                        double* dx) {
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
              const __m256d wv4 = _mm256_set1_pd(wv);
              int ox0, ox1;
              tap_range(kx, s.pad, s.stride, s.win, s.wout, ox0, ox1);
              for (int oy = oy0; oy < oy1; ++oy) {
                double* dxr = dxin +
                              int64_t(oy * s.stride + ky - s.pad) * s.win +
                              (kx - s.pad);
                const double* dyr = dyo + int64_t(oy) * s.wout;
                int ox = ox0;
                if (s.stride == 1) {
                  for (; ox + 4 <= ox1; ox += 4) {
                    __m256d gy = _mm256_loadu_pd(dyr + ox);
                    __m256d dd = _mm256_loadu_pd(dxr + ox);
                    dd = _mm256_add_pd(dd, _mm256_mul_pd(wv4, gy));
                    _mm256_storeu_pd(dxr + ox, dd);
                  }
                }
                // Strided scatter stays scalar: only the few downsample
                // convs hit it and the update order is already per-element.
                for (; ox < ox1; ++ox)
                  dxr[int64_t(ox) * s.stride] += wv * dyr[ox];
              }
            }
          }
        }
      }
}

void conv2d_dweight_avx2(const ConvShape& s, const double* x, const double* dy,
                         double* dw) {
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
            __m256d acc = _mm256_setzero_pd();
            for (int n = 0; n < s.n; ++n) {
              const double* xin = x + (int64_t(n) * s.cin + ci) * xs_c;
              const double* dyo = dy + (int64_t(n) * s.cout + co) * os_c;
              for (int oy = oy0; oy < oy1; ++oy) {
                const double* xr =
                    xin + int64_t(oy * s.stride + ky - s.pad) * s.win +
                    (kx - s.pad);
                const double* dyr = dyo + int64_t(oy) * s.wout;
                int ox = ox0;
                if (s.stride == 1) {
                  for (; ox + 4 <= ox1; ox += 4)
                    acc = _mm256_add_pd(
                        acc, _mm256_mul_pd(_mm256_loadu_pd(dyr + ox),
                                           _mm256_loadu_pd(xr + ox)));
                } else if (s.stride == 2) {
                  for (; ox + 5 <= ox1; ox += 4)
                    acc = _mm256_add_pd(
                        acc, _mm256_mul_pd(_mm256_loadu_pd(dyr + ox),
                                           load_even(xr + int64_t(ox) * 2)));
                }
                if (ox < ox1) {
                  // Fold the row tail into the correct stripe lanes.
                  alignas(32) double a4[4];
                  _mm256_store_pd(a4, acc);
                  for (; ox < ox1; ++ox)
                    a4[(ox - ox0) & 3] += dyr[ox] * xr[int64_t(ox) * s.stride];
                  acc = _mm256_load_pd(a4);
                }
              }
            }
            alignas(32) double a4[4];
            _mm256_store_pd(a4, acc);
            dwk[ky * s.k + kx] += (a4[0] + a4[1]) + (a4[2] + a4[3]);
          }
        }
      }
}

void sgd_update_avx2(double* p, double* v, const double* g, double lr,
                     double momentum, double wd, int64_t len) {
  const __m256d m4 = _mm256_set1_pd(momentum);
  const __m256d wd4 = _mm256_set1_pd(wd);
  const __m256d lr4 = _mm256_set1_pd(lr);
  int64_t i = 0;
  for (; i + 4 <= len; i += 4) {
    __m256d pv = _mm256_loadu_pd(p + i);
    __m256d vv = _mm256_loadu_pd(v + i);
    __m256d gv = _mm256_loadu_pd(g + i);
    vv = _mm256_add_pd(_mm256_add_pd(_mm256_mul_pd(m4, vv), gv),
                       _mm256_mul_pd(wd4, pv));
    pv = _mm256_sub_pd(pv, _mm256_mul_pd(lr4, vv));
    _mm256_storeu_pd(v + i, vv);
    _mm256_storeu_pd(p + i, pv);
  }
  for (; i < len; ++i) {
    v[i] = momentum * v[i] + g[i] + wd * p[i];
    p[i] -= lr * v[i];
  }
}

const KernelTable g_avx2{"avx2", conv2d_fwd_avx2, conv2d_dinput_avx2,
                         conv2d_dweight_avx2, sgd_update_avx2};

}  // namespace

const KernelTable* avx2_table() { return &g_avx2; }

}  // namespace ripeloc::kern

#else  // !__AVX2__

namespace ripeloc::kern {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace ripeloc::kern

#endif
