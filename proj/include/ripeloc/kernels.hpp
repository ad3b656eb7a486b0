#pragma once
// ===== Hot-loop kernels with runtime-dispatched SIMD variants =====
//
// The scalar table is the reference semantics; the AVX2 table must produce
// bitwise-identical results. That is achievable because each variant
// vectorizes across *independent output elements* and keeps the per-element
// accumulation order identical (no FMA, no reassociation). The one reduction
// kernel (conv2d_dweight) uses a fixed 4-lane striped accumulation in BOTH
// variants so the lane-combine order is part of the contract, not an
// implementation detail.
//
// Selection: first use picks AVX2 when the CPU supports it, unless overridden
// by set_kernel_backend() or the RIPELOC_KERNELS env var (scalar|avx2|auto).
// A NEON table would slot in the same way on aarch64 builds.

#include <cstdint>

namespace ripeloc::kern {

struct ConvShape {
  int n = 1;          // batch
  int cin = 0, hin = 0, win = 0;
  int cout = 0;
  int k = 1;          // square kernel
  int stride = 1;
  int pad = 0;        // symmetric zero padding
  int groups = 1;
  int hout = 0, wout = 0;
};

// All conv kernels ACCUMULATE into their destination: callers pre-fill the
// output with bias (forward) or rely on += gradient semantics (backward).
struct KernelTable {
  const char* name;
  void (*conv2d_fwd)(const ConvShape&, const double* x, const double* w,
                     double* out);
  void (*conv2d_dinput)(const ConvShape&, const double* w, const double* dy,
                        double* dx);
  void (*conv2d_dweight)(const ConvShape&, const double* x, const double* dy,
                         double* dw);
  // v = momentum*v + g + wd*p;  p -= lr*v   (elementwise)
  void (*sgd_update)(double* p, double* v, const double* g, double lr,
                     double momentum, double wd, int64_t len);
};

enum class Backend { Auto, Scalar, Avx2 };

const KernelTable& kernels();           // active table (lazy selection)
void set_kernel_backend(Backend b);     // test/CLI override
const char* kernel_backend_name();
bool avx2_available();

const KernelTable* scalar_table();
const KernelTable* avx2_table();        // nullptr when unsupported

inline int ceil_div_(int a, int b) { return a > 0 ? (a + b - 1) / b : a / b; }

// Valid output range [o0, o1) for one kernel tap: indices o with
// 0 <= o*stride + k_off - pad < in_size, clipped to [0, out_size).
inline void tap_range(int k_off, int pad, int stride, int in_size,
                      int out_size, int& o0, int& o1) {
  int lo = ceil_div_(pad - k_off, stride);
  int hi = (in_size - 1 - k_off + pad);
  int hi_o = hi >= 0 ? hi / stride + 1 : 0;
  o0 = lo < 0 ? 0 : lo;
  o1 = hi_o > out_size ? out_size : hi_o;
  if (o1 < o0) o1 = o0;
}

}  // namespace ripeloc::kern
