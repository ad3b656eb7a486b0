// ===== Kernel backend selection =====

#include "ripeloc/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace ripeloc::kern {

namespace {

Backend g_requested = Backend::Auto;
const KernelTable* g_active = nullptr;

const KernelTable* pick(Backend b) {
  if (b == Backend::Auto) {
    const char* env = std::getenv("RIPELOC_KERNELS");
    if (env != nullptr) {
      if (std::strcmp(env, "scalar") == 0) b = Backend::Scalar;
      else if (std::strcmp(env, "avx2") == 0) b = Backend::Avx2;
    }
  }
  if (b == Backend::Scalar) return scalar_table();
  const KernelTable* simd = avx2_available() ? avx2_table() : nullptr;
  if (b == Backend::Avx2 && simd == nullptr) return scalar_table();
  return simd != nullptr ? simd : scalar_table();
}

}  // namespace

bool avx2_available() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") != 0 && avx2_table() != nullptr;
#else
  return false;
#endif
}

const KernelTable& kernels() {
  if (g_active == nullptr) g_active = pick(g_requested);
  return *g_active;
}

void set_kernel_backend(Backend b) {
  g_requested = b;
  g_active = pick(b);
}

const char* kernel_backend_name() { return kernels().name; }

}  // namespace ripeloc::kern
