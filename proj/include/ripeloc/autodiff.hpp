#pragma once
// ===== Tape-based reverse-mode autodiff =====
//
// Ops compute eagerly; when recording is enabled each op pushes a node onto a
// global tape (single-threaded by contract). backward() accepts only scalar
// outputs, walks the tape once in reverse creation order (which is a valid
// reverse topological order), and ACCUMULATES gradients into every tensor
// that requires them. Calling backward() again without clearing re-zeroes
// only intermediate gradients, so leaf gradients add up across calls.
//
// Recording is off by default (inference fast path). Training code opens an
// ag::AutogradMode guard, runs forward+loss, calls backward, then clears the
// tape to release saved activations.

#include <array>
#include <vector>

#include "ripeloc/tensor.hpp"

namespace ripeloc::ag {

bool recording();
void set_recording(bool on);
struct AutogradMode {
  explicit AutogradMode(bool on) : prev_(recording()) { set_recording(on); }
  ~AutogradMode() { set_recording(prev_); }

 private:
  bool prev_;
};

size_t tape_size();
void clear_tape();
void backward(const Tensor& scalar_loss);

// --- convolution / normalization / pooling ---
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              int stride, int pad, int groups);
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor run_mean, Tensor run_var, bool training,
                 double momentum = 0.03, double eps = 1e-5);
Tensor maxpool(const Tensor& x, int k, int stride, int pad);
Tensor global_avgpool(const Tensor& x);  // (N,C,H,W) -> (N,C)
Tensor global_maxpool(const Tensor& x);  // (N,C,H,W) -> (N,C)
Tensor upsample2(const Tensor& x);       // nearest, factor 2

// --- activations / elementwise ---
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divt(const Tensor& a, const Tensor& b);
Tensor min2(const Tensor& a, const Tensor& b);  // ties take a
Tensor max2(const Tensor& a, const Tensor& b);  // ties take a
Tensor affine(const Tensor& x, double a, double b);  // a*x + b
Tensor square(const Tensor& x);
Tensor sqrt_t(const Tensor& x);
Tensor log_t(const Tensor& x);
Tensor atan_t(const Tensor& x);
Tensor clampv(const Tensor& x, double lo, double hi);

// --- shape / gather ---
Tensor concat_c(const std::vector<Tensor>& xs);       // along C of NCHW
Tensor slice_c(const Tensor& x, int c0, int c1);      // [c0, c1)
Tensor concat_rows(const std::vector<Tensor>& xs);    // along dim 0
Tensor reshape(const Tensor& x, Shape s);
Tensor scale_channels(const Tensor& x, const Tensor& gate);  // gate (N,C)
Tensor tokens_from_spatial(const Tensor& x);          // (N,C,H,W)->(N,HW,C)
Tensor spatial_from_tokens(const Tensor& x, int h, int w);
Tensor add_rows(const Tensor& x, const Tensor& pos);  // (N,T,C) + (T,C)
Tensor gather_cells(const Tensor& x,
                    const std::vector<std::array<int, 3>>& nij);  // ->(M,C)
Tensor slice_cols(const Tensor& x, int c0, int c1);   // (M,C) -> (M,c1-c0)

// --- linear algebra ---
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor matmul_bt(const Tensor& a, const Tensor& b);  // (B,M,K)x(B,N,K)->(B,M,N)
Tensor matmul_nn(const Tensor& a, const Tensor& b);  // (B,M,K)x(B,K,N)->(B,M,N)
Tensor softmax_last(const Tensor& x);

// --- reductions / losses ---
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
enum class Reduction { Mean, Sum };
// Numerically stabilized: max(z,0) - z*t + log1p(exp(-|z|)); t has no grad.
Tensor bce_with_logits(const Tensor& z, const Tensor& t, Reduction r);
// logits (M,4,B), integral+fractional targets (M,4) in bin units; mean loss.
// Targets outside [0, B-1] are clamped and counted (see dfl_clamp_count).
Tensor dfl_loss_mean(const Tensor& logits, const Tensor& target);
int64_t dfl_clamp_count();
void reset_dfl_clamp_count();
// logits (...,B) -> (...): expectation of bin index under softmax.
Tensor softmax_expectation(const Tensor& logits);

}  // namespace ripeloc::ag
