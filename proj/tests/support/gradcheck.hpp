#pragma once
// ===== Central finite-difference gradient checker =====
//
// Checks d(loss)/d(param) for every listed parameter, where loss is a fixed
// random projection of the op output (so the whole Jacobian is exercised by
// one backward pass). Relative error uses max(|analytic|, |numeric|, 1e-2)
// as denominator: a true relative test in the normal regime that degrades to
// a 1e-6 absolute tolerance for near-zero gradients, where central
// differences are dominated by roundoff.

#include <cmath>
#include <functional>
#include <vector>

#include "ripeloc/autodiff.hpp"
#include "ripeloc/rng.hpp"
#include "ripeloc/tensor.hpp"

namespace gradcheck {

using ripeloc::Rng;
using ripeloc::Tensor;

constexpr double kEps = 1e-5;
constexpr double kTol = 1e-4;

struct Result {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  bool ok() const { return max_rel_err < kTol; }
};

inline double project(const Tensor& out, const std::vector<double>& r) {
  double s = 0.0;
  for (int64_t i = 0; i < out.numel(); ++i) s += out.data()[i] * r[size_t(i)];
  return s;
}

// f builds the op output from the current parameter values (pure w.r.t. the
// listed params). cap limits checked elements per tensor (<=0: all).
inline Result check(const std::function<Tensor()>& f,
                    std::vector<Tensor> params, uint64_t seed = 7,
                    int64_t cap = 0) {
  for (Tensor& p : params) p.set_requires_grad(true);

  Tensor out;
  {
    ripeloc::ag::AutogradMode guard(true);
    ripeloc::ag::clear_tape();
    out = f();
  }
  Rng rng(seed);
  std::vector<double> proj(size_t(out.numel()));
  for (double& v : proj) v = rng.uniform(-1.0, 1.0);

  // Analytic gradient of the projected scalar: seed out.grad with proj and
  // run the tape manually through a sum node substitute.
  Tensor loss;
  {
    ripeloc::ag::AutogradMode guard(true);
    Tensor projt = Tensor::from_vec(out.shape(), proj);
    loss = ripeloc::ag::sum_all(ripeloc::ag::mul(out, projt));
  }
  for (Tensor& p : params) p.zero_grad();
  ripeloc::ag::backward(loss);

  std::vector<std::vector<double>> analytic;
  for (Tensor& p : params) {
    p.grad();  // ensure allocated
    analytic.emplace_back(p.grad(), p.grad() + p.numel());
  }
  ripeloc::ag::clear_tape();

  Result res;
  ripeloc::ag::AutogradMode guard(false);  // value-only recomputation
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    const int64_t n = p.numel();
    const int64_t step =
        (cap > 0 && n > cap) ? (n + cap - 1) / cap : 1;
    for (int64_t i = 0; i < n; i += step) {
      const double saved = p.data()[i];
      p.data()[i] = saved + kEps;
      const double lp = project(f(), proj);
      p.data()[i] = saved - kEps;
      const double lm = project(f(), proj);
      p.data()[i] = saved;
      const double numeric = (lp - lm) / (2.0 * kEps);
      const double a = analytic[pi][size_t(i)];
      const double denom =
          std::max({std::abs(a), std::abs(numeric), 1e-2});
      res.max_rel_err =
          std::max(res.max_rel_err, std::abs(a - numeric) / denom);
      ++res.checked;
    }
  }
  for (Tensor& p : params) {
    p.set_requires_grad(false);
    p.zero_grad();
  }
  return res;
}

}  // namespace gradcheck
