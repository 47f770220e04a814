// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Minimal reverse-mode differentiation over Tensor values.
//
// A Var is a shared handle to a graph node. Ops record their inputs and a
// backward closure only when at least one input requires a gradient, so a
// pass over constant weights builds no graph and frees intermediates as
// soon as their handles go out of scope.

#ifndef SSMSEP_AUTOGRAD_H_
#define SSMSEP_AUTOGRAD_H_

#include <functional>
#include <memory>
#include <vector>

#include "ssmsep/ssm_kernel.h"
#include "ssmsep/tensor.h"

namespace ssmsep {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  explicit operator bool() const noexcept { return static_cast<bool>(node_); }

  const Tensor<T>& value() const { return node_->value; }
  // Only meaningful for leaves (optimizer updates, checkpoint loading).
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  const Tensor<T>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Seeds root.grad with `seed` and propagates to every reachable node that
// requires a gradient. Leaves accumulate; call zero_grad between steps.
template <typename T>
void backward(const Var<T>& root, const Tensor<T>& seed);

// Scalar root, seed 1.
template <typename T>
void backward(const Var<T>& root);

namespace ag {

template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

// Wraps an op result. `fn` is dropped (and no graph is recorded) when no
// parent requires a gradient.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, BackwardFn<T> fn);

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

// Elementwise, equal shapes.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> one_minus(const Var<T>& a);

// Broadcast a [D] vector over the last dimension of x.
template <typename T> Var<T> add_last(const Var<T>& x, const Var<T>& bias);
template <typename T> Var<T> mul_last(const Var<T>& x, const Var<T>& gain);

// y[..., o] = sum_i x[..., i] w[o, i]
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w);

template <typename T> Var<T> silu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> tanh(const Var<T>& x);
template <typename T> Var<T> softplus(const Var<T>& x);
// -exp(x), the negative-definite reparameterization of a diagonal A.
template <typename T> Var<T> neg_exp(const Var<T>& x);

template <typename T> Var<T> sum(const Var<T>& x);

// Last-axis slicing and concatenation.
template <typename T> Var<T> slice_last(const Var<T>& x, std::size_t lo, std::size_t hi);
template <typename T> Var<T> concat_last(const std::vector<Var<T>>& xs);
// Leading-axis slicing and concatenation.
template <typename T> Var<T> slice0(const Var<T>& x, std::size_t lo, std::size_t hi);
template <typename T> Var<T> concat0(const std::vector<Var<T>>& xs);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
// out.shape[i] = x.shape[perm[i]]
template <typename T> Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm);
// Reverse axis 1 of a [S, L, D] tensor.
template <typename T> Var<T> reverse_seq(const Var<T>& x);
// Step t of a [S, L, D] tensor as [S, D], and the inverse stacking.
template <typename T> Var<T> select_step(const Var<T>& x, std::size_t t);
template <typename T> Var<T> stack_steps(const std::vector<Var<T>>& steps);

// Depthwise causal convolution along L of x [S, L, E] with w [E, W] and
// bias [E]: y_t = b + sum_k w[k] x_{t - W + 1 + k}.
template <typename T>
Var<T> causal_dwconv(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

template <typename T>
Var<T> selective_scan(const Var<T>& x, const Var<T>& delta, const Var<T>& a, const Var<T>& b,
                      const Var<T>& c, const ssm::ScanOptions& opts = {});

// Normalization over the last dimension.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps);
template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& gain, T eps);

// x [Tf, F, G*D]: normalizes each (frame, group) over its F*D values, then
// applies per-channel gain/bias [G*D].
template <typename T>
Var<T> frame_norm(const Var<T>& x, std::size_t groups, const Var<T>& gain, const Var<T>& bias,
                  T eps);

// Sliding windows along axis 1 of [S, L, D] with symmetric zero padding.
struct UnfoldGeometry {
  std::size_t length = 0;  // L
  std::size_t kernel = 1;  // K
  std::size_t stride = 1;  // S
  std::size_t pad_left = 0;
  std::size_t padded = 0;
  std::size_t windows = 0;  // L'

  static UnfoldGeometry make(std::size_t length, std::size_t kernel, std::size_t stride);
};
// [S, L, D] -> [S, L', K*D], feature index k*D + d.
template <typename T> Var<T> unfold_seq(const Var<T>& x, std::size_t kernel, std::size_t stride);
// Overlap-add adjoint of unfold_seq: [S, L', K*D] -> [S, L, D].
template <typename T>
Var<T> fold_seq(const Var<T>& x, std::size_t kernel, std::size_t stride, std::size_t length);

// 2-D convolution over x [Cin, H, W] with w [Cout, Cin, kh, kw], zero
// padding kh/2, kw/2, unit stride (odd kernels only).
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& w);

// Batched products: a [B, M, K] x b [B, K, N], and a [B, M, K] x b[B, N, K]^T.
template <typename T> Var<T> bmm(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> bmm_nt(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> softmax_last(const Var<T>& x);

}  // namespace ag
}  // namespace ssmsep

#endif  // SSMSEP_AUTOGRAD_H_
