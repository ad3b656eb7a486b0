#pragma once
// ===== Dense f64 NCHW tensor =====
//
// A Tensor is a shared handle to a contiguous row-major f64 buffer plus an
// optional gradient buffer of the same shape. Values are written once by the
// producing op; gradients are the only mutable aspect after creation (they
// accumulate additively across backward passes). Shape arity is by
// convention: images/activations (N,C,H,W), matrices (M,K), vectors (C),
// scalars (1).

#include <cstring>
#include <initializer_list>
#include <memory>
#include <vector>

#include "ripeloc/common.hpp"

namespace ripeloc {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;   // empty until first use
  bool requires_grad = false; // leaf wants gradient accumulation
  bool from_op = false;       // produced by a recorded op (grad flows through)
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = std::move(s);
    t.impl_->data.assign(size_t(shape_numel(t.impl_->shape)), 0.0);
    return t;
  }
  static Tensor full(Shape s, double v) {
    Tensor t = zeros(std::move(s));
    for (double& x : t.impl_->data) x = v;
    return t;
  }
  static Tensor from_vec(Shape s, std::vector<double> v) {
    if (int64_t(v.size()) != shape_numel(s))
      throw ShapeError("from_vec: " + shape_str(s) + " needs " +
                       std::to_string(shape_numel(s)) + " values, got " +
                       std::to_string(v.size()));
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = std::move(s);
    t.impl_->data = std::move(v);
    return t;
  }
  static Tensor scalar(double v) { return full({1}, v); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return int(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[size_t(i)]; }
  int64_t numel() const { return int64_t(impl_->data.size()); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& vec() { return impl_->data; }
  const std::vector<double>& vec() const { return impl_->data; }

  double item() const {
    if (numel() != 1)
      throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }

  // Row-major element access (slow path; loops should index data() directly).
  double& at(std::initializer_list<int> idx) {
    return impl_->data[size_t(offset(idx))];
  }
  double at(std::initializer_list<int> idx) const {
    return impl_->data[size_t(offset(idx))];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }
  bool from_op() const { return impl_->from_op; }
  void mark_from_op() { impl_->from_op = true; }
  // Whether backward must deliver a gradient here.
  bool grad_needed() const {
    return impl_ != nullptr && (impl_->requires_grad || impl_->from_op);
  }

  double* grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad.data();
  }
  const double* grad() const { return impl_->grad.data(); }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() {
    if (!impl_->grad.empty())
      std::memset(impl_->grad.data(), 0, impl_->grad.size() * sizeof(double));
  }

  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  bool same_object(const Tensor& o) const { return impl_ == o.impl_; }
  TensorImpl* impl() const { return impl_.get(); }

 private:
  int64_t offset(std::initializer_list<int> idx) const {
    const Shape& s = impl_->shape;
    if (idx.size() != s.size())
      throw ShapeError("index arity " + std::to_string(idx.size()) +
                       " vs shape " + shape_str(s));
    int64_t off = 0;
    size_t i = 0;
    for (int v : idx) {
      off = off * s[i] + v;
      ++i;
    }
    return off;
  }

  std::shared_ptr<TensorImpl> impl_;
};

}  // namespace ripeloc
