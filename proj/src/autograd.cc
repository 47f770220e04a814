// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "ssmsep/autograd.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace ssmsep {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<MatR<T>>;
template <typename T>
using CMap = Eigen::Map<const MatR<T>>;

// Gradient buffer of parent i, or nullptr if it does not need one.
template <typename T>
Tensor<T>* pgrad(Node<T>& self, std::size_t i) {
  Node<T>* p = self.parents[i].get();
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

template <typename T>
const Tensor<T>& pval(Node<T>& self, std::size_t i) {
  return self.parents[i]->value;
}

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ContractError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

template <typename T>
std::size_t last_dim(const Var<T>& x, const char* op) {
  if (x.value().rank() == 0) throw ContractError(std::string(op) + ": rank-0 input");
  return x.shape().back();
}

template <typename T>
void require_rank(const Var<T>& x, std::size_t r, const char* op) {
  if (x.value().rank() != r)
    throw ContractError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                        shape_str(x.shape()));
}

// Elementwise unary op with derivative expressed through (x, y).
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& x, F f, D dfdx) {
  Tensor<T> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return ag::make_op<T>(std::move(y), {x}, [dfdx](Node<T>& self) {
    auto* gx = pgrad(self, 0);
    if (!gx) return;
    const auto& xv = pval(self, 0);
    for (std::size_t i = 0; i < xv.size(); ++i)
      (*gx)[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
  });
}

template <typename T>
T sigmoid_of(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace

template <typename T>
void backward(const Var<T>& root, const Tensor<T>& seed) {
  if (!root.requires_grad()) throw ContractError("backward: root does not require grad");
  if (seed.shape() != root.shape())
    throw ContractError("backward: seed shape " + shape_str(seed.shape()) + " != " +
                        shape_str(root.shape()));

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  auto& g = root.node()->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

template <typename T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) throw ContractError("backward: root is not a scalar");
  backward(root, Tensor<T>(root.shape(), T(1)));
}

namespace ag {

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, BackwardFn<T> fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool req = false;
  for (const auto& p : parents) req = req || p.requires_grad();
  if (req) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.shared());
    node->backward = std::move(fn);
  }
  return Var<T>(std::move(node));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "add");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return make_op<T>(std::move(y), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = pgrad(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "sub");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return make_op<T>(std::move(y), {a, b}, [](Node<T>& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = pgrad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "mul");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return make_op<T>(std::move(y), {a, b}, [](Node<T>& self) {
    const auto& av = pval(self, 0);
    const auto& bv = pval(self, 1);
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = pgrad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> y = a.value();
  for (auto& v : y.values()) v *= s;
  return make_op<T>(std::move(y), {a}, [s](Node<T>& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
  });
}

template <typename T>
Var<T> one_minus(const Var<T>& a) {
  Tensor<T> y = a.value();
  for (auto& v : y.values()) v = T(1) - v;
  return make_op<T>(std::move(y), {a}, [](Node<T>& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

template <typename T>
Var<T> add_last(const Var<T>& x, const Var<T>& bias) {
  const std::size_t d = last_dim(x, "add_last");
  if (bias.value().size() != d) throw ContractError("add_last: bias size mismatch");
  Tensor<T> y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias.value()[i % d];
  return make_op<T>(std::move(y), {x, bias}, [d](Node<T>& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = pgrad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % d] += self.grad[i];
  });
}

template <typename T>
Var<T> mul_last(const Var<T>& x, const Var<T>& gain) {
  const std::size_t d = last_dim(x, "mul_last");
  if (gain.value().size() != d) throw ContractError("mul_last: gain size mismatch");
  Tensor<T> y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= gain.value()[i % d];
  return make_op<T>(std::move(y), {x, gain}, [d](Node<T>& self) {
    const auto& xv = pval(self, 0);
    const auto& gv = pval(self, 1);
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * gv[i % d];
    if (auto* g = pgrad(self, 1))
      for (std::size_t i = 0; i < xv.size(); ++i) (*g)[i % d] += self.grad[i] * xv[i];
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
  require_rank(w, 2, "linear(w)");
  const std::size_t in = last_dim(x, "linear");
  if (w.shape()[1] != in)
    throw ContractError("linear: input width " + std::to_string(in) + " vs weight " +
                        shape_str(w.shape()));
  const std::size_t out = w.shape()[0];
  const std::size_t rows = x.value().size() / in;
  Shape ys = x.shape();
  ys.back() = out;
  Tensor<T> y(ys);
  const auto r = static_cast<Eigen::Index>(rows);
  const auto ni = static_cast<Eigen::Index>(in);
  const auto no = static_cast<Eigen::Index>(out);
  Map<T>(y.data(), r, no).noalias() =
      CMap<T>(x.value().data(), r, ni) * CMap<T>(w.value().data(), no, ni).transpose();
  return make_op<T>(std::move(y), {x, w}, [r, ni, no](Node<T>& self) {
    CMap<T> dy(self.grad.data(), r, no);
    if (auto* g = pgrad(self, 0))
      Map<T>(g->data(), r, ni).noalias() += dy * CMap<T>(pval(self, 1).data(), no, ni);
    if (auto* g = pgrad(self, 1))
      Map<T>(g->data(), no, ni).noalias() += dy.transpose() * CMap<T>(pval(self, 0).data(), r, ni);
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  return unary<T>(
      x, [](T v) { return v * sigmoid_of(v); },
      [](T v, T) {
        const T s = sigmoid_of(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary<T>(
      x, [](T v) { return sigmoid_of(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return unary<T>(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> softplus(const Var<T>& x) {
  return unary<T>(
      x, [](T v) { return v > T(20) ? v : std::log1p(std::exp(v)); },
      [](T v, T) { return sigmoid_of(v); });
}

template <typename T>
Var<T> neg_exp(const Var<T>& x) {
  return unary<T>(
      x, [](T v) { return -std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  return make_op<T>(Tensor<T>({1}, acc), {x}, [](Node<T>& self) {
    if (auto* g = pgrad(self, 0))
      for (auto& v : g->values()) v += self.grad[0];
  });
}

template <typename T>
Var<T> slice_last(const Var<T>& x, std::size_t lo, std::size_t hi) {
  const std::size_t d = last_dim(x, "slice_last");
  if (lo >= hi || hi > d) throw ContractError("slice_last: bad range");
  const std::size_t w = hi - lo, rows = x.value().size() / d;
  Shape ys = x.shape();
  ys.back() = w;
  Tensor<T> y(ys);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.value().data() + r * d + lo, w, y.data() + r * w);
  return make_op<T>(std::move(y), {x}, [d, lo, w, rows](Node<T>& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < w; ++i) (*g)[r * d + lo + i] += self.grad[r * w + i];
  });
}

template <typename T>
Var<T> concat_last(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_last: no inputs");
  Shape lead = xs[0].shape();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& x : xs) {
    Shape l = x.shape();
    const std::size_t w = last_dim(x, "concat_last");
    l.pop_back();
    if (l != lead) throw ContractError("concat_last: leading shapes differ");
    widths.push_back(w);
    total += w;
  }
  const std::size_t rows = numel(lead);
  Shape ys = lead;
  ys.push_back(total);
  Tensor<T> y(ys);
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(xs[k].value().data() + r * widths[k], widths[k], y.data() + r * total + off);
    off += widths[k];
  }
  return make_op<T>(std::move(y), xs, [widths, total, rows](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (auto* g = pgrad(self, k))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < widths[k]; ++i)
            (*g)[r * widths[k] + i] += self.grad[r * total + off + i];
      off += widths[k];
    }
  });
}

template <typename T>
Var<T> slice0(const Var<T>& x, std::size_t lo, std::size_t hi) {
  if (x.value().rank() == 0 || lo >= hi || hi > x.shape()[0])
    throw ContractError("slice0: bad range");
  const std::size_t inner = x.value().size() / x.shape()[0];
  Shape ys = x.shape();
  ys[0] = hi - lo;
  Tensor<T> y(ys);
  std::copy_n(x.value().data() + lo * inner, (hi - lo) * inner, y.data());
  return make_op<T>(std::move(y), {x}, [lo, inner](Node<T>& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[lo * inner + i] += self.grad[i];
  });
}

template <typename T>
Var<T> concat0(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("concat0: no inputs");
  Shape tail(xs[0].shape().begin() + 1, xs[0].shape().end());
  std::size_t lead = 0;
  for (const auto& x : xs) {
    if (Shape(x.shape().begin() + 1, x.shape().end()) != tail)
      throw ContractError("concat0: trailing shapes differ");
    lead += x.shape()[0];
  }
  Shape ys = xs[0].shape();
  ys[0] = lead;
  Tensor<T> y(ys);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    std::copy(x.value().values().begin(), x.value().values().end(), y.data() + off);
    off += x.value().size();
  }
  return make_op<T>(std::move(y), xs, [offsets](Node<T>& self) {
    for (std::size_t k = 0; k < offsets.size(); ++k)
      if (auto* g = pgrad(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offsets[k] + i];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (numel(shape) != x.value().size())
    throw ContractError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_op<T>(x.value().reshaped(std::move(shape)), {x}, [](Node<T>& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

namespace {

// Applies `fn(out_index, in_index)` for every element of x permuted by perm.
template <typename F>
void for_each_permuted(const Shape& in_shape, const std::vector<std::size_t>& perm, F fn) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[perm[i]];
    step[i] = in_stride[perm[i]];
  }
  const std::size_t total = numel(in_shape);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < total; ++o) {
    fn(o, src);
    for (std::size_t a = rank; a-- > 0;) {
      if (++idx[a] < out_shape[a]) {
        src += step[a];
        break;
      }
      src -= step[a] * (out_shape[a] - 1);
      idx[a] = 0;
    }
  }
}

}  // namespace

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& xs = x.shape();
  if (perm.size() != xs.size()) throw ContractError("permute: rank mismatch");
  std::vector<bool> used(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || used[p]) throw ContractError("permute: invalid permutation");
    used[p] = true;
  }
  Shape ys(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = xs[perm[i]];
  Tensor<T> y(ys);
  const T* src = x.value().data();
  T* dst = y.data();
  for_each_permuted(xs, perm, [&](std::size_t o, std::size_t i) { dst[o] = src[i]; });
  return make_op<T>(std::move(y), {x}, [xs, perm](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) {
      T* gd = g->data();
      const T* dy = self.grad.data();
      for_each_permuted(xs, perm, [&](std::size_t o, std::size_t i) { gd[i] += dy[o]; });
    }
  });
}

template <typename T>
Var<T> reverse_seq(const Var<T>& x) {
  require_rank(x, 3, "reverse_seq");
  const std::size_t S = x.shape()[0], L = x.shape()[1], D = x.shape()[2];
  auto flip = [S, L, D](const T* src, T* dst, bool accumulate) {
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t t = 0; t < L; ++t) {
        const T* a = src + (s * L + t) * D;
        T* b = dst + (s * L + (L - 1 - t)) * D;
        for (std::size_t d = 0; d < D; ++d) b[d] = accumulate ? b[d] + a[d] : a[d];
      }
  };
  Tensor<T> y(x.shape());
  flip(x.value().data(), y.data(), false);
  return make_op<T>(std::move(y), {x}, [flip](Node<T>& self) {
    if (auto* g = pgrad(self, 0)) flip(self.grad.data(), g->data(), true);
  });
}

template <typename T>
Var<T> select_step(const Var<T>& x, std::size_t t) {
  require_rank(x, 3, "select_step");
  const std::size_t S = x.shape()[0], L = x.shape()[1], D = x.shape()[2];
  if (t >= L) throw ContractError("select_step: step out of range");
  Tensor<T> y({S, D});
  for (std::size_t s = 0; s < S; ++s)
    std::copy_n(x.value().data() + (s * L + t) * D, D, y.data() + s * D);
  return make_op<T>(std::move(y), {x}, [S, L, D, t](Node<T>& self) {
    if (auto* g = pgrad(self, 0))
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t d = 0; d < D; ++d) (*g)[(s * L + t) * D + d] += self.grad[s * D + d];
  });
}

template <typename T>
Var<T> stack_steps(const std::vector<Var<T>>& steps) {
  if (steps.empty()) throw ContractError("stack_steps: no inputs");
  const Shape s0 = steps[0].shape();
  if (s0.size() != 2) throw ContractError("stack_steps: steps must be [S, D]");
  const std::size_t S = s0[0], D = s0[1], L = steps.size();
  Tensor<T> y({S, L, D});
  for (std::size_t t = 0; t < L; ++t) {
    if (steps[t].shape() != s0) throw ContractError("stack_steps: step shapes differ");
    for (std::size_t s = 0; s < S; ++s)
      std::copy_n(steps[t].value().data() + s * D, D, y.data() + (s * L + t) * D);
  }
  return make_op<T>(std::move(y), steps, [S, L, D](Node<T>& self) {
    for (std::size_t t = 0; t < L; ++t)
      if (auto* g = pgrad(self, t))
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t d = 0; d < D; ++d) (*g)[s * D + d] += self.grad[(s * L + t) * D + d];
  });
}

template <typename T>
Var<T> causal_dwconv(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  require_rank(x, 3, "causal_dwconv");
  require_rank(w, 2, "causal_dwconv(w)");
  const std::size_t S = x.shape()[0], L = x.shape()[1], E = x.shape()[2], W = w.shape()[1];
  if (w.shape()[0] != E || bias.value().size() != E)
    throw ContractError("causal_dwconv: weight/bias width mismatch");
  Tensor<T> y(x.shape());
  const T* xd = x.value().data();
  const T* wd = w.value().data();
  const T* bd = bias.value().data();
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t t = 0; t < L; ++t) {
      T* yt = y.data() + (s * L + t) * E;
      for (std::size_t e = 0; e < E; ++e) yt[e] = bd[e];
      for (std::size_t k = 0; k < W; ++k) {
        if (t + k + 1 < W) continue;
        const T* xt = xd + (s * L + t + k + 1 - W) * E;
        for (std::size_t e = 0; e < E; ++e) yt[e] += wd[e * W + k] * xt[e];
      }
    }
  return make_op<T>(std::move(y), {x, w, bias}, [S, L, E, W](Node<T>& self) {
    const T* xd = pval(self, 0).data();
    const T* wd = pval(self, 1).data();
    auto* gx = pgrad(self, 0);
    auto* gw = pgrad(self, 1);
    auto* gb = pgrad(self, 2);
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t t = 0; t < L; ++t) {
        const T* dy = self.grad.data() + (s * L + t) * E;
        if (gb)
          for (std::size_t e = 0; e < E; ++e) (*gb)[e] += dy[e];
        for (std::size_t k = 0; k < W; ++k) {
          if (t + k + 1 < W) continue;
          const std::size_t src = (s * L + t + k + 1 - W) * E;
          for (std::size_t e = 0; e < E; ++e) {
            if (gx) (*gx)[src + e] += wd[e * W + k] * dy[e];
            if (gw) (*gw)[e * W + k] += dy[e] * xd[src + e];
          }
        }
      }
  });
}

template <typename T>
Var<T> selective_scan(const Var<T>& x, const Var<T>& delta, const Var<T>& a, const Var<T>& b,
                      const Var<T>& c, const ssm::ScanOptions& opts) {
  ssm::ScanParams<T> p{delta.value(), a.value(), b.value(), c.value()};
  const bool req = x.requires_grad() || delta.requires_grad() || a.requires_grad() ||
                   b.requires_grad() || c.requires_grad();
  if (!req) return constant(ssm::selective_scan(x.value(), p));
  auto cache = std::make_shared<ssm::ScanCache<T>>();
  Tensor<T> y = ssm::selective_scan(x.value(), p, nullptr, cache.get(), opts);
  return make_op<T>(std::move(y), {x, delta, a, b, c}, [cache](Node<T>& self) {
    auto grads = ssm::selective_scan_grad(*cache, self.grad);
    const Tensor<T>* parts[5] = {&grads.dx, &grads.dparams.delta, &grads.dparams.a,
                                 &grads.dparams.b, &grads.dparams.c};
    for (std::size_t k = 0; k < 5; ++k)
      if (auto* g = pgrad(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += (*parts[k])[i];
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const std::size_t D = last_dim(x, "layer_norm");
  if (gain.value().size() != D || bias.value().size() != D)
    throw ContractError("layer_norm: gain/bias size mismatch");
  const std::size_t rows = x.value().size() / D;
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * D;
    T mean = 0, var = 0;
    for (std::size_t d = 0; d < D; ++d) mean += xr[d];
    mean /= T(D);
    for (std::size_t d = 0; d < D; ++d) var += (xr[d] - mean) * (xr[d] - mean);
    var /= T(D);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t d = 0; d < D; ++d) {
      xhat[r * D + d] = (xr[d] - mean) * inv_std[r];
      y[r * D + d] = xhat[r * D + d] * gain.value()[d] + bias.value()[d];
    }
  }
  return make_op<T>(std::move(y), {x, gain, bias},
                    [xhat = std::move(xhat), inv_std = std::move(inv_std), D, rows](Node<T>& self) {
                      const auto& gv = pval(self, 1);
                      auto* gx = pgrad(self, 0);
                      auto* gg = pgrad(self, 1);
                      auto* gb = pgrad(self, 2);
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T* dy = self.grad.data() + r * D;
                        const T* xh = xhat.data() + r * D;
                        T m1 = 0, m2 = 0;
                        for (std::size_t d = 0; d < D; ++d) {
                          const T dxh = dy[d] * gv[d];
                          m1 += dxh;
                          m2 += dxh * xh[d];
                          if (gg) (*gg)[d] += dy[d] * xh[d];
                          if (gb) (*gb)[d] += dy[d];
                        }
                        if (!gx) continue;
                        m1 /= T(D);
                        m2 /= T(D);
                        for (std::size_t d = 0; d < D; ++d)
                          (*gx)[r * D + d] += inv_std[r] * (dy[d] * gv[d] - m1 - xh[d] * m2);
                      }
                    });
}

template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& gain, T eps) {
  const std::size_t D = last_dim(x, "rms_norm");
  if (gain.value().size() != D) throw ContractError("rms_norm: gain size mismatch");
  const std::size_t rows = x.value().size() / D;
  std::vector<T> inv_rms(rows);
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * D;
    T ms = 0;
    for (std::size_t d = 0; d < D; ++d) ms += xr[d] * xr[d];
    inv_rms[r] = T(1) / std::sqrt(ms / T(D) + eps);
    for (std::size_t d = 0; d < D; ++d) y[r * D + d] = xr[d] * inv_rms[r] * gain.value()[d];
  }
  return make_op<T>(std::move(y), {x, gain}, [inv_rms = std::move(inv_rms), D, rows](Node<T>& self) {
    const auto& xv = pval(self, 0);
    const auto& gv = pval(self, 1);
    auto* gx = pgrad(self, 0);
    auto* gg = pgrad(self, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* dy = self.grad.data() + r * D;
      const T* xr = xv.data() + r * D;
      T m = 0;
      for (std::size_t d = 0; d < D; ++d) {
        const T xh = xr[d] * inv_rms[r];
        m += dy[d] * gv[d] * xh;
        if (gg) (*gg)[d] += dy[d] * xh;
      }
      if (!gx) continue;
      m /= T(D);
      for (std::size_t d = 0; d < D; ++d)
        (*gx)[r * D + d] += inv_rms[r] * (dy[d] * gv[d] - xr[d] * inv_rms[r] * m);
    }
  });
}

template <typename T>
Var<T> frame_norm(const Var<T>& x, std::size_t groups, const Var<T>& gain, const Var<T>& bias,
                  T eps) {
  require_rank(x, 3, "frame_norm");
  const std::size_t Tf = x.shape()[0], F = x.shape()[1], CH = x.shape()[2];
  if (groups == 0 || CH % groups != 0)
    throw ConfigError("frame_norm: channels not divisible by groups");
  if (gain.value().size() != CH || bias.value().size() != CH)
    throw ContractError("frame_norm: gain/bias size mismatch");
  const std::size_t D = CH / groups;
  const T count = T(F * D);
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(Tf * groups);
  Tensor<T> y(x.shape());
  const T* xd = x.value().data();
  for (std::size_t t = 0; t < Tf; ++t)
    for (std::size_t g = 0; g < groups; ++g) {
      T mean = 0, var = 0;
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t d = 0; d < D; ++d) mean += xd[(t * F + f) * CH + g * D + d];
      mean /= count;
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t d = 0; d < D; ++d) {
          const T v = xd[(t * F + f) * CH + g * D + d] - mean;
          var += v * v;
        }
      const T is = T(1) / std::sqrt(var / count + eps);
      inv_std[t * groups + g] = is;
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t d = 0; d < D; ++d) {
          const std::size_t i = (t * F + f) * CH + g * D + d;
          xhat[i] = (xd[i] - mean) * is;
          y[i] = xhat[i] * gain.value()[g * D + d] + bias.value()[g * D + d];
        }
    }
  return make_op<T>(
      std::move(y), {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), Tf, F, CH, D, groups,
       count](Node<T>& self) {
        const auto& gv = pval(self, 1);
        auto* gx = pgrad(self, 0);
        auto* gg = pgrad(self, 1);
        auto* gb = pgrad(self, 2);
        for (std::size_t t = 0; t < Tf; ++t)
          for (std::size_t g = 0; g < groups; ++g) {
            T m1 = 0, m2 = 0;
            for (std::size_t f = 0; f < F; ++f)
              for (std::size_t d = 0; d < D; ++d) {
                const std::size_t c = g * D + d, i = (t * F + f) * CH + c;
                const T dxh = self.grad[i] * gv[c];
                m1 += dxh;
                m2 += dxh * xhat[i];
                if (gg) (*gg)[c] += self.grad[i] * xhat[i];
                if (gb) (*gb)[c] += self.grad[i];
              }
            if (!gx) continue;
            m1 /= count;
            m2 /= count;
            const T is = inv_std[t * groups + g];
            for (std::size_t f = 0; f < F; ++f)
              for (std::size_t d = 0; d < D; ++d) {
                const std::size_t c = g * D + d, i = (t * F + f) * CH + c;
                (*gx)[i] += is * (self.grad[i] * gv[c] - m1 - xhat[i] * m2);
              }
          }
      });
}

UnfoldGeometry UnfoldGeometry::make(std::size_t length, std::size_t kernel, std::size_t stride) {
  if (kernel == 0 || stride == 0 || stride > kernel)
    throw ConfigError("unfold: need kernel >= stride >= 1");
  if (length == 0) throw ConfigError("unfold: empty sequence");
  UnfoldGeometry g;
  g.length = length;
  g.kernel = kernel;
  g.stride = stride;
  g.pad_left = kernel - stride;
  std::size_t padded = std::max(length + 2 * g.pad_left, kernel);
  while ((padded - kernel) % stride != 0) ++padded;
  g.padded = padded;
  g.windows = (padded - kernel) / stride + 1;
  return g;
}

namespace {

// Shared index walk of unfold/fold: calls fn(window_offset, seq_offset) for
// each (window, tap) that lands inside the unpadded sequence.
template <typename F>
void unfold_walk(const UnfoldGeometry& g, F fn) {
  for (std::size_t w = 0; w < g.windows; ++w)
    for (std::size_t k = 0; k < g.kernel; ++k) {
      const std::size_t p = w * g.stride + k;
      if (p < g.pad_left || p - g.pad_left >= g.length) continue;
      fn(w, k, p - g.pad_left);
    }
}

template <typename T>
void unfold_into(const T* x, T* y, std::size_t S, std::size_t D, const UnfoldGeometry& g,
                 bool accumulate) {
  const std::size_t L = g.length, W = g.windows, KD = g.kernel * D;
  for (std::size_t s = 0; s < S; ++s)
    unfold_walk(g, [&](std::size_t w, std::size_t k, std::size_t p) {
      const T* src = x + (s * L + p) * D;
      T* dst = y + (s * W + w) * KD + k * D;
      for (std::size_t d = 0; d < D; ++d) dst[d] = accumulate ? dst[d] + src[d] : src[d];
    });
}

template <typename T>
void fold_into(const T* x, T* y, std::size_t S, std::size_t D, const UnfoldGeometry& g) {
  const std::size_t L = g.length, W = g.windows, KD = g.kernel * D;
  for (std::size_t s = 0; s < S; ++s)
    unfold_walk(g, [&](std::size_t w, std::size_t k, std::size_t p) {
      const T* src = x + (s * W + w) * KD + k * D;
      T* dst = y + (s * L + p) * D;
      for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
    });
}

}  // namespace

template <typename T>
Var<T> unfold_seq(const Var<T>& x, std::size_t kernel, std::size_t stride) {
  require_rank(x, 3, "unfold_seq");
  const std::size_t S = x.shape()[0], D = x.shape()[2];
  const auto g = UnfoldGeometry::make(x.shape()[1], kernel, stride);
  Tensor<T> y({S, g.windows, kernel * D});
  unfold_into(x.value().data(), y.data(), S, D, g, false);
  return make_op<T>(std::move(y), {x}, [S, D, g](Node<T>& self) {
    if (auto* gx = pgrad(self, 0)) fold_into(self.grad.data(), gx->data(), S, D, g);
  });
}

template <typename T>
Var<T> fold_seq(const Var<T>& x, std::size_t kernel, std::size_t stride, std::size_t length) {
  require_rank(x, 3, "fold_seq");
  const auto g = UnfoldGeometry::make(length, kernel, stride);
  if (x.shape()[1] != g.windows || x.shape()[2] % kernel != 0)
    throw ContractError("fold_seq: input " + shape_str(x.shape()) + " does not match geometry");
  const std::size_t S = x.shape()[0], D = x.shape()[2] / kernel;
  Tensor<T> y({S, length, D});
  fold_into(x.value().data(), y.data(), S, D, g);
  return make_op<T>(std::move(y), {x}, [S, D, g](Node<T>& self) {
    if (auto* gx = pgrad(self, 0)) unfold_into(self.grad.data(), gx->data(), S, D, g, true);
  });
}

namespace {

// dst[c, h, w] = src[c, h + dh, w + dw] (zero outside).
template <typename T>
void shift2d(const T* src, T* dst, std::size_t C, std::size_t H, std::size_t W, long dh, long dw,
             bool accumulate_back) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < H; ++h) {
      const long sh = long(h) + dh;
      if (sh < 0 || sh >= long(H)) continue;
      for (std::size_t w = 0; w < W; ++w) {
        const long sw = long(w) + dw;
        if (sw < 0 || sw >= long(W)) continue;
        const std::size_t a = (c * H + h) * W + w;
        const std::size_t b = (c * H + std::size_t(sh)) * W + std::size_t(sw);
        if (accumulate_back)
          dst[b] += src[a];
        else
          dst[a] = src[b];
      }
    }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d(w)");
  const std::size_t Cin = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const std::size_t Cout = w.shape()[0], KH = w.shape()[2], KW = w.shape()[3];
  if (w.shape()[1] != Cin) throw ContractError("conv2d: channel mismatch");
  if (KH % 2 == 0 || KW % 2 == 0) throw ConfigError("conv2d: kernel must be odd");
  const auto hw = static_cast<Eigen::Index>(H * W);
  const auto ci = static_cast<Eigen::Index>(Cin), co = static_cast<Eigen::Index>(Cout);

  // Per-tap weight matrices [Cout, Cin].
  auto tap_weights = [Cout, Cin, KH, KW](const Tensor<T>& wt, std::size_t i, std::size_t j) {
    MatR<T> m(Cout, Cin);
    for (std::size_t o = 0; o < Cout; ++o)
      for (std::size_t c = 0; c < Cin; ++c) m(o, c) = wt(o, c, i, j);
    return m;
  };

  Tensor<T> y({Cout, H, W});
  std::vector<T> shifted(Cin * H * W);
  Map<T> ym(y.data(), co, hw);
  for (std::size_t i = 0; i < KH; ++i)
    for (std::size_t j = 0; j < KW; ++j) {
      std::fill(shifted.begin(), shifted.end(), T(0));
      shift2d(x.value().data(), shifted.data(), Cin, H, W, long(i) - long(KH / 2),
              long(j) - long(KW / 2), false);
      ym.noalias() += tap_weights(w.value(), i, j) * Map<T>(shifted.data(), ci, hw);
    }
  return make_op<T>(std::move(y), {x, w}, [=](Node<T>& self) {
    auto* gx = pgrad(self, 0);
    auto* gw = pgrad(self, 1);
    CMap<T> dy(self.grad.data(), co, hw);
    std::vector<T> buf(Cin * H * W);
    for (std::size_t i = 0; i < KH; ++i)
      for (std::size_t j = 0; j < KW; ++j) {
        const long dh = long(i) - long(KH / 2), dw = long(j) - long(KW / 2);
        if (gw) {
          std::fill(buf.begin(), buf.end(), T(0));
          shift2d(pval(self, 0).data(), buf.data(), Cin, H, W, dh, dw, false);
          const MatR<T> g = dy * Map<T>(buf.data(), ci, hw).transpose();
          for (std::size_t o = 0; o < Cout; ++o)
            for (std::size_t c = 0; c < Cin; ++c) (*gw)(o, c, i, j) += g(o, c);
        }
        if (gx) {
          Map<T>(buf.data(), ci, hw).noalias() =
              tap_weights(pval(self, 1), i, j).transpose() * dy;
          shift2d(buf.data(), gx->data(), Cin, H, W, dh, dw, true);
        }
      }
  });
}

template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const std::size_t B = a.shape()[0], M = a.shape()[1], K = a.shape()[2], N = b.shape()[2];
  if (b.shape()[0] != B || b.shape()[1] != K) throw ContractError("bmm: shape mismatch");
  const auto m = Eigen::Index(M), k = Eigen::Index(K), n = Eigen::Index(N);
  Tensor<T> y({B, M, N});
  for (std::size_t i = 0; i < B; ++i)
    Map<T>(y.data() + i * M * N, m, n).noalias() =
        CMap<T>(a.value().data() + i * M * K, m, k) * CMap<T>(b.value().data() + i * K * N, k, n);
  return make_op<T>(std::move(y), {a, b}, [B, M, K, N, m, k, n](Node<T>& self) {
    auto* ga = pgrad(self, 0);
    auto* gb = pgrad(self, 1);
    for (std::size_t i = 0; i < B; ++i) {
      CMap<T> dy(self.grad.data() + i * M * N, m, n);
      if (ga)
        Map<T>(ga->data() + i * M * K, m, k).noalias() +=
            dy * CMap<T>(pval(self, 1).data() + i * K * N, k, n).transpose();
      if (gb)
        Map<T>(gb->data() + i * K * N, k, n).noalias() +=
            CMap<T>(pval(self, 0).data() + i * M * K, m, k).transpose() * dy;
    }
  });
}

template <typename T>
Var<T> bmm_nt(const Var<T>& a, const Var<T>& b) {
  require_rank(a, 3, "bmm_nt");
  require_rank(b, 3, "bmm_nt");
  const std::size_t B = a.shape()[0], M = a.shape()[1], K = a.shape()[2], N = b.shape()[1];
  if (b.shape()[0] != B || b.shape()[2] != K) throw ContractError("bmm_nt: shape mismatch");
  const auto m = Eigen::Index(M), k = Eigen::Index(K), n = Eigen::Index(N);
  Tensor<T> y({B, M, N});
  for (std::size_t i = 0; i < B; ++i)
    Map<T>(y.data() + i * M * N, m, n).noalias() =
        CMap<T>(a.value().data() + i * M * K, m, k) *
        CMap<T>(b.value().data() + i * N * K, n, k).transpose();
  return make_op<T>(std::move(y), {a, b}, [B, M, K, N, m, k, n](Node<T>& self) {
    auto* ga = pgrad(self, 0);
    auto* gb = pgrad(self, 1);
    for (std::size_t i = 0; i < B; ++i) {
      CMap<T> dy(self.grad.data() + i * M * N, m, n);
      if (ga)
        Map<T>(ga->data() + i * M * K, m, k).noalias() +=
            dy * CMap<T>(pval(self, 1).data() + i * N * K, n, k);
      if (gb)
        Map<T>(gb->data() + i * N * K, n, k).noalias() +=
            dy.transpose() * CMap<T>(pval(self, 0).data() + i * M * K, m, k);
    }
  });
}

template <typename T>
Var<T> softmax_last(const Var<T>& x) {
  const std::size_t D = last_dim(x, "softmax_last");
  const std::size_t rows = x.value().size() / D;
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * D;
    T* yr = y.data() + r * D;
    const T mx = *std::max_element(xr, xr + D);
    T z = 0;
    for (std::size_t d = 0; d < D; ++d) z += (yr[d] = std::exp(xr[d] - mx));
    for (std::size_t d = 0; d < D; ++d) yr[d] /= z;
  }
  return make_op<T>(std::move(y), {x}, [D, rows](Node<T>& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = self.value.data() + r * D;
      const T* dy = self.grad.data() + r * D;
      T dot = 0;
      for (std::size_t d = 0; d < D; ++d) dot += dy[d] * yr[d];
      for (std::size_t d = 0; d < D; ++d) (*g)[r * D + d] += yr[d] * (dy[d] - dot);
    }
  });
}

}  // namespace ag

#define SSMSEP_INSTANTIATE(T)                                                                \
  template void backward<T>(const Var<T>&, const Tensor<T>&);                                \
  template void backward<T>(const Var<T>&);                                                  \
  namespace ag {                                                                             \
  template Var<T> make_op<T>(Tensor<T>, std::vector<Var<T>>, BackwardFn<T>);                 \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                      \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                      \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                      \
  template Var<T> scale<T>(const Var<T>&, T);                                                \
  template Var<T> one_minus<T>(const Var<T>&);                                               \
  template Var<T> add_last<T>(const Var<T>&, const Var<T>&);                                 \
  template Var<T> mul_last<T>(const Var<T>&, const Var<T>&);                                 \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> silu<T>(const Var<T>&);                                                    \
  template Var<T> sigmoid<T>(const Var<T>&);                                                 \
  template Var<T> tanh<T>(const Var<T>&);                                                    \
  template Var<T> softplus<T>(const Var<T>&);                                                \
  template Var<T> neg_exp<T>(const Var<T>&);                                                 \
  template Var<T> sum<T>(const Var<T>&);                                                     \
  template Var<T> slice_last<T>(const Var<T>&, std::size_t, std::size_t);                    \
  template Var<T> concat_last<T>(const std::vector<Var<T>>&);                                \
  template Var<T> slice0<T>(const Var<T>&, std::size_t, std::size_t);                        \
  template Var<T> concat0<T>(const std::vector<Var<T>>&);                                    \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                          \
  template Var<T> permute<T>(const Var<T>&, const std::vector<std::size_t>&);                \
  template Var<T> reverse_seq<T>(const Var<T>&);                                             \
  template Var<T> select_step<T>(const Var<T>&, std::size_t);                                \
  template Var<T> stack_steps<T>(const std::vector<Var<T>>&);                                \
  template Var<T> causal_dwconv<T>(const Var<T>&, const Var<T>&, const Var<T>&);             \
  template Var<T> selective_scan<T>(const Var<T>&, const Var<T>&, const Var<T>&,             \
                                    const Var<T>&, const Var<T>&, const ssm::ScanOptions&);  \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);             \
  template Var<T> rms_norm<T>(const Var<T>&, const Var<T>&, T);                              \
  template Var<T> frame_norm<T>(const Var<T>&, std::size_t, const Var<T>&, const Var<T>&, T); \
  template Var<T> unfold_seq<T>(const Var<T>&, std::size_t, std::size_t);                    \
  template Var<T> fold_seq<T>(const Var<T>&, std::size_t, std::size_t, std::size_t);         \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> bmm<T>(const Var<T>&, const Var<T>&);                                      \
  template Var<T> bmm_nt<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> softmax_last<T>(const Var<T>&);                                            \
  }

SSMSEP_INSTANTIATE(float)
SSMSEP_INSTANTIATE(double)
#undef SSMSEP_INSTANTIATE

}  // namespace ssmsep
