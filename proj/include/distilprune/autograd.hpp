// Copyright 2026 The distilprune Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Tape-based reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every primitive application in creation order, which is a
// topological order by construction. Var is a cheap handle (tape, node id).
// Parameters live outside the tape; Tape::param() binds one as a leaf whose
// gradient is added to Parameter::grad when backward() runs.

#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "distilprune/errors.hpp"
#include "distilprune/tensor.hpp"

namespace distilprune {

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kMatmul,
  kConv1d,
  kSigmoid,
  kGelu,
  kExp,
  kLog,
  kSqrt,
  kSoftmax,
  kLayerNorm,
  kClamp,
  kSum,
  kMean,
  kAbs,
  kTranspose,
  kReshape,
  kConcat,
  kSlice,
  kBroadcast,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kMatmul: return "matmul";
    case Op::kConv1d: return "conv1d";
    case Op::kSigmoid: return "sigmoid";
    case Op::kGelu: return "gelu";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSqrt: return "sqrt";
    case Op::kSoftmax: return "softmax";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kClamp: return "clamp";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kAbs: return "abs";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kBroadcast: return "broadcast";
  }
  return "unknown";
}

/// Trainable tensor that outlives any single tape.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() {
    grad.shape = value.shape;
    grad.data.assign(value.size(), T{0});
  }
};

template <typename T>
class Tape;

/// Handle to a node on a tape. Valid as long as the tape is not reset.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  T item() const { return value().data.at(0); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  /// `check_finite` rejects NaN/Inf inputs to every primitive; it defaults
  /// to on for 64-bit (test) mode and off for 32-bit training.
  explicit Tape(bool check_finite = std::is_same_v<T, double>)
      : check_finite_(check_finite) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }
  Var<T> scalar(T v) { return constant(Tensor<T>::scalar(v)); }

  /// Free-standing leaf; its gradient is readable through grad() after
  /// backward().
  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    Node node;
    node.op = Op::kLeaf;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  /// Leaf bound to a parameter. backward() adds into `p.grad`.
  Var<T> param(Parameter<T>& p, bool requires_grad = true) {
    Var<T> v = leaf(p.value, requires_grad);
    nodes_.back().param = requires_grad ? &p : nullptr;
    return v;
  }

  /// Records an output computed by a primitive. `fn` receives the tape and
  /// the node id and pushes the node's gradient into its inputs.
  Var<T> record(Op op, std::vector<std::size_t> inputs, Tensor<T> value,
                BackwardFn fn) {
    Node node;
    node.op = op;
    node.value = std::move(value);
    for (std::size_t in : inputs) {
      if (nodes_[in].requires_grad) node.requires_grad = true;
    }
    node.inputs = std::move(inputs);
    if (node.requires_grad) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  /// Validates inputs before a primitive runs.
  void check_inputs(Op op, std::initializer_list<Var<T>> inputs) const {
    for (const Var<T>& in : inputs) {
      if (in.valid() && &in.tape() != this) {
        throw TapeError(std::string(op_name(op)) +
                        ": operand belongs to a different tape");
      }
    }
    if (!check_finite_) return;
    for (const Var<T>& in : inputs) {
      for (T x : value(in.id()).data) {
        if (!std::isfinite(x)) {
          throw NumericError(std::string(op_name(op)) +
                             ": non-finite input element");
        }
      }
    }
  }

  void backward(Var<T> loss) {
    if (consumed_) {
      throw TapeError("backward: tape already consumed; re-record the graph");
    }
    if (loss.size() != 1) {
      throw TapeError("backward: loss must be scalar, got shape " +
                      to_string(loss.shape()));
    }
    consumed_ = true;
    Node& root = nodes_[loss.id()];
    if (!root.requires_grad) return;
    root.grad.assign(1, T{1});
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (node.grad.empty()) continue;
      if (node.backward) node.backward(*this, id);
      if (node.param != nullptr) {
        Parameter<T>& p = *node.param;
        if (p.grad.size() != p.value.size()) p.zero_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
          p.grad.data[i] += node.grad[i];
        }
      }
    }
  }

  /// Gradient accumulated for `v`; zeros when nothing flowed into it.
  Tensor<T> grad(Var<T> v) const {
    const Node& node = nodes_[v.id()];
    if (node.grad.empty()) return Tensor<T>(node.value.shape);
    return Tensor<T>(node.value.shape, node.grad);
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  Op op(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const {
    return nodes_[id].inputs;
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  const std::vector<T>& out_grad(std::size_t id) const {
    return nodes_[id].grad;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Zero-initialized gradient buffer for `id`, or nullptr when no gradient
  /// is needed for that node.
  T* grad_buffer(std::size_t id) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return nullptr;
    if (node.grad.empty()) node.grad.assign(node.value.size(), T{0});
    return node.grad.data();
  }

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  // deque keeps references to earlier nodes stable while recording.
  std::deque<Node> nodes_;
  bool consumed_ = false;
  bool check_finite_;
};

namespace detail {

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b, Op op) {
  if (&a.tape() != &b.tape()) {
    throw TapeError(std::string(op_name(op)) +
                    ": operands belong to different tapes");
  }
  return a.tape();
}

template <typename T>
std::string shapes_msg(Op op, const Shape& a, const Shape& b) {
  return std::string(op_name(op)) + ": incompatible shapes " + to_string(a) +
         " and " + to_string(b);
}

/// Shared driver for broadcasting binary primitives. `fwd(x, y)` gives the
/// output element, `dfx/dfy(x, y, out)` the local partials.
template <typename T, typename Fwd, typename Dx, typename Dy>
Var<T> binary(Op op, Var<T> a, Var<T> b, Fwd fwd, Dx dfx, Dy dfy) {
  Tape<T>& tape = same_tape(a, b, op);
  tape.check_inputs(op, {a, b});
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Shape out_shape;
  try {
    out_shape = broadcast_shapes(av.shape, bv.shape, op_name(op));
  } catch (const ShapeError&) {
    throw ShapeError(shapes_msg<T>(op, av.shape, bv.shape));
  }
  auto sa = broadcast_strides(av.shape, out_shape);
  auto sb = broadcast_strides(bv.shape, out_shape);
  Tensor<T> out(out_shape);
  if (av.shape == bv.shape) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    strided_walk(out_shape, sa, sb, [&](std::size_t o, std::size_t i,
                                        std::size_t j) {
      out[o] = fwd(av[i], bv[j]);
    });
  }
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return tape.record(
      op, {ia, ib}, std::move(out),
      [ia, ib, out_shape, sa, sb, dfx, dfy](Tape<T>& t, std::size_t self) {
        const auto& g = t.out_grad(self);
        const auto& x = t.value(ia).data;
        const auto& y = t.value(ib).data;
        const auto& z = t.value(self).data;
        T* gx = t.grad_buffer(ia);
        T* gy = t.grad_buffer(ib);
        strided_walk(out_shape, sa, sb, [&](std::size_t o, std::size_t i,
                                            std::size_t j) {
          if (gx) gx[i] += g[o] * dfx(x[i], y[j], z[o]);
          if (gy) gy[j] += g[o] * dfy(x[i], y[j], z[o]);
        });
      });
}

/// Shared driver for elementwise unary primitives; `df(x, y)` is dy/dx.
template <typename T, typename Fwd, typename Df>
Var<T> unary(Op op, Var<T> a, Fwd fwd, Df df) {
  Tape<T>& tape = a.tape();
  tape.check_inputs(op, {a});
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ia = a.id();
  return tape.record(op, {ia}, std::move(out),
                     [ia, df](Tape<T>& t, std::size_t self) {
                       const auto& g = t.out_grad(self);
                       const auto& x = t.value(ia).data;
                       const auto& y = t.value(self).data;
                       T* gx = t.grad_buffer(ia);
                       if (!gx) return;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         gx[i] += g[i] * df(x[i], y[i]);
                       }
                     });
}

// C = A * B for row-major A (m x k), B (k x n), accumulating into C.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// dA += dC * B^T
template <typename T>
void gemm_grad_a(const T* dc, const T* b, T* da, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* dcrow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc{0};
      for (std::size_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
      da[i * k + p] += acc;
    }
  }
}

// dB += A^T * dC
template <typename T>
void gemm_grad_b(const T* a, const T* dc, T* db, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* dcrow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      T* dbrow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * dcrow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with trailing-dimension broadcasting.

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      Op::kAdd, a, b, [](T x, T y) { return x + y; },
      [](T, T, T) { return T{1}; }, [](T, T, T) { return T{1}; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      Op::kSub, a, b, [](T x, T y) { return x - y; },
      [](T, T, T) { return T{1}; }, [](T, T, T) { return T{-1}; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      Op::kMul, a, b, [](T x, T y) { return x * y; },
      [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      Op::kDiv, a, b, [](T x, T y) { return x / y; },
      [](T, T y, T) { return T{1} / y; },
      [](T, T y, T z) { return -z / y; });
}

template <typename T>
Var<T> neg(Var<T> a) {
  return detail::unary<T>(
      Op::kNeg, a, [](T x) { return -x; }, [](T, T) { return T{-1}; });
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <typename T>
Var<T> operator/(Var<T> a, Var<T> b) { return div(a, b); }
template <typename T>
Var<T> operator-(Var<T> a) { return neg(a); }

template <typename T>
Var<T> operator*(Var<T> a, T s) { return mul(a, a.tape().scalar(s)); }
template <typename T>
Var<T> operator*(T s, Var<T> a) { return mul(a.tape().scalar(s), a); }
template <typename T>
Var<T> operator+(Var<T> a, T s) { return add(a, a.tape().scalar(s)); }
template <typename T>
Var<T> operator-(T s, Var<T> a) { return sub(a.tape().scalar(s), a); }
template <typename T>
Var<T> operator-(Var<T> a, T s) { return sub(a, a.tape().scalar(s)); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities.

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary<T>(
      Op::kSigmoid, a,
      [](T x) {
        if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
        const T e = std::exp(x);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

namespace detail {
// tanh-approximation constants: sqrt(2/pi) and the cubic coefficient.
inline constexpr double kGeluScale = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;
}  // namespace detail

/// GELU, tanh approximation:
/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
Var<T> gelu(Var<T> a) {
  return detail::unary<T>(
      Op::kGelu, a,
      [](T x) {
        const T c = static_cast<T>(detail::kGeluScale);
        const T k = static_cast<T>(detail::kGeluCubic);
        return T{0.5} * x * (T{1} + std::tanh(c * (x + k * x * x * x)));
      },
      [](T x, T) {
        const T c = static_cast<T>(detail::kGeluScale);
        const T k = static_cast<T>(detail::kGeluCubic);
        const T th = std::tanh(c * (x + k * x * x * x));
        return T{0.5} * (T{1} + th) +
               T{0.5} * x * (T{1} - th * th) * c * (T{1} + T{3} * k * x * x);
      });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return detail::unary<T>(
      Op::kExp, a, [](T x) { return std::exp(x); },
      [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> a) {
  return detail::unary<T>(
      Op::kLog, a, [](T x) { return std::log(x); },
      [](T x, T) { return T{1} / x; });
}

template <typename T>
Var<T> sqrt(Var<T> a) {
  return detail::unary<T>(
      Op::kSqrt, a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T{0.5} / y; });
}

/// Subgradient 0 at the kink.
template <typename T>
Var<T> abs(Var<T> a) {
  return detail::unary<T>(
      Op::kAbs, a, [](T x) { return std::abs(x); },
      [](T x, T) {
        return x > T{0} ? T{1} : (x < T{0} ? T{-1} : T{0});
      });
}

/// min(hi, max(lo, x)). Gradient is 1 strictly inside (lo, hi) and 0 on or
/// beyond either bound, so saturated gates stay frozen.
template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  return detail::unary<T>(
      Op::kClamp, a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T{1} : T{0}; });
}

// ---------------------------------------------------------------------------
// Linear algebra.

/// Matrix product over the last two axes. `a` is [..., m, k]; `b` is either
/// [k, n] (shared across the batch) or [..., k, n] with the same leading
/// extents as `a`.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::same_tape(a, b, Op::kMatmul);
  tape.check_inputs(Op::kMatmul, {a, b});
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const auto fail = [&] {
    throw ShapeError(detail::shapes_msg<T>(Op::kMatmul, as, bs));
  };
  if (as.size() < 2 || bs.size() < 2) fail();
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as[as.size() - 1];
  const std::size_t n = bs[bs.size() - 1];
  if (bs[bs.size() - 2] != k) fail();
  const bool batched_b = bs.size() > 2;
  if (batched_b && (bs.size() != as.size() ||
                    !std::equal(as.begin(), as.end() - 2, bs.begin()))) {
    fail();
  }
  std::size_t batch = 1;
  for (std::size_t d = 0; d + 2 < as.size(); ++d) batch *= as[d];
  Shape out_shape(as.begin(), as.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  const T* ad = a.value().data.data();
  const T* bd = b.value().data.data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    detail::gemm_acc(ad + bi * m * k, bd + (batched_b ? bi * k * n : 0),
                     out.data.data() + bi * m * n, m, k, n);
  }
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return tape.record(
      Op::kMatmul, {ia, ib}, std::move(out),
      [ia, ib, batch, m, k, n, batched_b](Tape<T>& t, std::size_t self) {
        const T* g = t.out_grad(self).data();
        const T* x = t.value(ia).data.data();
        const T* y = t.value(ib).data.data();
        T* gx = t.grad_buffer(ia);
        T* gy = t.grad_buffer(ib);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const std::size_t boff = batched_b ? bi * k * n : 0;
          if (gx) {
            detail::gemm_grad_a(g + bi * m * n, y + boff, gx + bi * m * k, m,
                                k, n);
          }
          if (gy) {
            detail::gemm_grad_b(x + bi * m * k, g + bi * m * n, gy + boff, m,
                                k, n);
          }
        }
      });
}

/// 1-D cross-correlation. `x` is [C_in, L] or [B, C_in, L]; `w` is
/// [C_out, C_in, K]. Zero padding of `padding` frames on both ends.
/// Output length is (L + 2*padding - K) / stride + 1.
template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w, std::size_t stride,
              std::size_t padding = 0) {
  Tape<T>& tape = detail::same_tape(x, w, Op::kConv1d);
  tape.check_inputs(Op::kConv1d, {x, w});
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if ((xs.size() != 2 && xs.size() != 3) || ws.size() != 3 ||
      xs[xs.size() - 2] != ws[1] || stride == 0 ||
      xs.back() + 2 * padding < ws[2]) {
    throw ShapeError(detail::shapes_msg<T>(Op::kConv1d, xs, ws));
  }
  const std::size_t batch = xs.size() == 3 ? xs[0] : 1;
  const std::size_t cin = ws[1];
  const std::size_t cout = ws[0];
  const std::size_t kw = ws[2];
  const std::size_t len = xs.back();
  const std::size_t out_len = (len + 2 * padding - kw) / stride + 1;
  Shape out_shape = xs.size() == 3 ? Shape{batch, cout, out_len}
                                   : Shape{cout, out_len};
  Tensor<T> out(out_shape);
  const T* xd = x.value().data.data();
  const T* wd = w.value().data.data();
  // Visits (output index, input index, weight index) triples in a fixed order.
  auto walk = [=](auto&& f) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t t = 0; t < out_len; ++t) {
          const std::size_t oi = (b * cout + o) * out_len + t;
          for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t k = 0; k < kw; ++k) {
              const std::size_t pos = t * stride + k;
              if (pos < padding || pos - padding >= len) continue;
              f(oi, (b * cin + c) * len + (pos - padding),
                (o * cin + c) * kw + k);
            }
          }
        }
      }
    }
  };
  T* od = out.data.data();
  walk([&](std::size_t oi, std::size_t xi, std::size_t wi) {
    od[oi] += xd[xi] * wd[wi];
  });
  const std::size_t ix = x.id();
  const std::size_t iw = w.id();
  return tape.record(Op::kConv1d, {ix, iw}, std::move(out),
                     [ix, iw, walk](Tape<T>& t, std::size_t self) {
                       const T* g = t.out_grad(self).data();
                       const T* xv = t.value(ix).data.data();
                       const T* wv = t.value(iw).data.data();
                       T* gx = t.grad_buffer(ix);
                       T* gw = t.grad_buffer(iw);
                       walk([&](std::size_t oi, std::size_t xi,
                                std::size_t wi) {
                         if (gx) gx[xi] += g[oi] * wv[wi];
                         if (gw) gw[wi] += g[oi] * xv[xi];
                       });
                     });
}

// ---------------------------------------------------------------------------
// Axis-wise normalizations and reductions.

template <typename T>
Var<T> softmax(Var<T> a, int axis = -1) {
  Tape<T>& tape = a.tape();
  tape.check_inputs(Op::kSoftmax, {a});
  const Tensor<T>& av = a.value();
  const std::size_t ax = normalize_axis(axis, av.rank(), "softmax");
  const auto s = detail::split_at(av.shape, ax);
  Tensor<T> out(av.shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T mx = av[base];
      for (std::size_t j = 1; j < s.n; ++j) {
        mx = std::max(mx, av[base + j * s.inner]);
      }
      T total{0};
      for (std::size_t j = 0; j < s.n; ++j) {
        const T e = std::exp(av[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= total;
    }
  }
  const std::size_t ia = a.id();
  return tape.record(Op::kSoftmax, {ia}, std::move(out),
                     [ia, s](Tape<T>& t, std::size_t self) {
                       const auto& g = t.out_grad(self);
                       const auto& y = t.value(self).data;
                       T* gx = t.grad_buffer(ia);
                       if (!gx) return;
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t i = 0; i < s.inner; ++i) {
                           const std::size_t base = o * s.n * s.inner + i;
                           T dot{0};
                           for (std::size_t j = 0; j < s.n; ++j) {
                             const std::size_t e = base + j * s.inner;
                             dot += g[e] * y[e];
                           }
                           for (std::size_t j = 0; j < s.n; ++j) {
                             const std::size_t e = base + j * s.inner;
                             gx[e] += y[e] * (g[e] - dot);
                           }
                         }
                       }
                     });
}

/// (x - mean) / sqrt(var + eps) along `axis`, biased variance, no affine.
template <typename T>
Var<T> layer_norm(Var<T> a, int axis = -1, T eps = T{1e-5}) {
  Tape<T>& tape = a.tape();
  tape.check_inputs(Op::kLayerNorm, {a});
  const Tensor<T>& av = a.value();
  const std::size_t ax = normalize_axis(axis, av.rank(), "layer_norm");
  const auto s = detail::split_at(av.shape, ax);
  Tensor<T> out(av.shape);
  std::vector<T> inv_std(s.outer * s.inner);
  const T n = static_cast<T>(s.n);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T mean{0};
      for (std::size_t j = 0; j < s.n; ++j) mean += av[base + j * s.inner];
      mean /= n;
      T var{0};
      for (std::size_t j = 0; j < s.n; ++j) {
        const T d = av[base + j * s.inner] - mean;
        var += d * d;
      }
      var /= n;
      const T is = T{1} / std::sqrt(var + eps);
      inv_std[o * s.inner + i] = is;
      for (std::size_t j = 0; j < s.n; ++j) {
        out[base + j * s.inner] = (av[base + j * s.inner] - mean) * is;
      }
    }
  }
  const std::size_t ia = a.id();
  return tape.record(
      Op::kLayerNorm, {ia}, std::move(out),
      [ia, s, inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
        const auto& g = t.out_grad(self);
        const auto& y = t.value(self).data;
        T* gx = t.grad_buffer(ia);
        if (!gx) return;
        const T n = static_cast<T>(s.n);
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.n * s.inner + i;
            T mg{0};
            T mgy{0};
            for (std::size_t j = 0; j < s.n; ++j) {
              const std::size_t e = base + j * s.inner;
              mg += g[e];
              mgy += g[e] * y[e];
            }
            mg /= n;
            mgy /= n;
            const T is = inv_std[o * s.inner + i];
            for (std::size_t j = 0; j < s.n; ++j) {
              const std::size_t e = base + j * s.inner;
              gx[e] += is * (g[e] - mg - y[e] * mgy);
            }
          }
        }
      });
}

namespace detail {
template <typename T>
Var<T> reduce_axis(Op op, Var<T> a, int axis, T scale) {
  Tape<T>& tape = a.tape();
  tape.check_inputs(op, {a});
  const Tensor<T>& av = a.value();
  const std::size_t ax = normalize_axis(axis, av.rank(), op_name(op));
  const auto s = split_at(av.shape, ax);
  Shape out_shape = av.shape;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      T acc{0};
      for (std::size_t j = 0; j < s.n; ++j) {
        acc += av[(o * s.n + j) * s.inner + i];
      }
      out[o * s.inner + i] = acc * scale;
    }
  }
  const std::size_t ia = a.id();
  return tape.record(op, {ia}, std::move(out),
                     [ia, s, scale](Tape<T>& t, std::size_t self) {
                       const auto& g = t.out_grad(self);
                       T* gx = t.grad_buffer(ia);
                       if (!gx) return;
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t j = 0; j < s.n; ++j) {
                           for (std::size_t i = 0; i < s.inner; ++i) {
                             gx[(o * s.n + j) * s.inner + i] +=
                                 g[o * s.inner + i] * scale;
                           }
                         }
                       }
                     });
}

template <typename T>
Var<T> reduce_all(Op op, Var<T> a, bool average) {
  Tape<T>& tape = a.tape();
  tape.check_inputs(op, {a});
  const Tensor<T>& av = a.value();
  T acc{0};
  for (T x : av.data) acc += x;
  const T scale = average ? T{1} / static_cast<T>(av.size()) : T{1};
  const std::size_t ia = a.id();
  return tape.record(op, {ia}, Tensor<T>::scalar(acc * scale),
                     [ia, scale](Tape<T>& t, std::size_t self) {
                       const T g = t.out_grad(self)[0] * scale;
                       T* gx = t.grad_buffer(ia);
                       if (!gx) return;
                       const std::size_t n = t.value(ia).size();
                       for (std::size_t i = 0; i < n; ++i) gx[i] += g;
                     });
}
}  // namespace detail

/// Sum along `axis`, removing it.
template <typename T>
Var<T> sum(Var<T> a, int axis) {
  return detail::reduce_axis(Op::kSum, a, axis, T{1});
}

/// Sum of every element, as a rank-0 tensor.
template <typename T>
Var<T> sum(Var<T> a) {
  return detail::reduce_all(Op::kSum, a, false);
}

template <typename T>
Var<T> mean(Var<T> a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.shape().size(), "mean");
  return detail::reduce_axis(Op::kMean, a, axis,
                             T{1} / static_cast<T>(a.shape()[ax]));
}

template <typename T>
Var<T> mean(Var<T> a) {
  return detail::reduce_all(Op::kMean, a, true);
}

// ---------------------------------------------------------------------------
// Layout primitives.

/// Swaps two axes.
template <typename T>
Var<T> transpose(Var<T> a, int axis0 = -2, int axis1 = -1) {
  Tape<T>& tape = a.tape();
  tape.check_inputs(Op::kTranspose, {a});
  const Tensor<T>& av = a.value();
  const std::size_t d0 = normalize_axis(axis0, av.rank(), "transpose");
  const std::size_t d1 = normalize_axis(axis1, av.rank(), "transpose");
  Shape out_shape = av.shape;
  std::swap(out_shape[d0], out_shape[d1]);
  auto in_strides = contiguous_strides(av.shape);
  std::swap(in_strides[d0], in_strides[d1]);
  const auto out_strides = contiguous_strides(out_shape);
  Tensor<T> out(out_shape);
  detail::strided_walk(out_shape, in_strides, out_strides,
                       [&](std::size_t o, std::size_t i, std::size_t) {
                         out[o] = av[i];
                       });
  const std::size_t ia = a.id();
  return tape.record(Op::kTranspose, {ia}, std::move(out),
                     [ia, out_shape, in_strides](Tape<T>& t, std::size_t self) {
                       const auto& g = t.out_grad(self);
                       T* gx = t.grad_buffer(ia);
                       if (!gx) return;
                       detail::strided_walk(
                           out_shape, in_strides, in_strides,
                           [&](std::size_t o, std::size_t i, std::size_t) {
                             gx[i] += g[o];
                           });
                     });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tape<T>& tape = a.tape();
  tape.check_inputs(Op::kReshape, {a});
  if (numel(shape) != a.size()) {
    throw ShapeError(detail::shapes_msg<T>(Op::kReshape, a.shape(), shape));
  }
  Tensor<T> out(std::move(shape), a.value().data);
  const std::size_t ia = a.id();
  return tape.record(Op::kReshape, {ia}, std::move(out),
                     [ia](Tape<T>& t, std::size_t self) {
                       const auto& g = t.out_grad(self);
                       T* gx = t.grad_buffer(ia);
                       if (!gx) return;
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     });
}

/// Concatenates along `axis`; all other extents must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Tape<T>& tape = parts.front().tape();
  for (const auto& p : parts) tape.check_inputs(Op::kConcat, {p});
  const Shape& first = parts.front().shape();
  const std::size_t ax = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) {
      throw ShapeError(detail::shapes_msg<T>(Op::kConcat, first, s));
    }
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != ax && s[d] != first[d]) {
        throw ShapeError(detail::shapes_msg<T>(Op::kConcat, first, s));
      }
    }
    out_shape[ax] += s[ax];
    ids.push_back(p.id());
    widths.push_back(s[ax]);
  }
  const auto split = detail::split_at(out_shape, ax);
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& pv = parts[pi].value();
    const std::size_t w = widths[pi];
    for (std::size_t o = 0; o < split.outer; ++o) {
      for (std::size_t j = 0; j < w; ++j) {
        for (std::size_t i = 0; i < split.inner; ++i) {
          out[(o * split.n + offset + j) * split.inner + i] =
              pv[(o * w + j) * split.inner + i];
        }
      }
    }
    offset += w;
  }
  return tape.record(Op::kConcat, ids, std::move(out),
                     [ids, widths, split](Tape<T>& t, std::size_t self) {
                       const auto& g = t.out_grad(self);
                       std::size_t offset = 0;
                       for (std::size_t pi = 0; pi < ids.size(); ++pi) {
                         const std::size_t w = widths[pi];
                         T* gx = t.grad_buffer(ids[pi]);
                         if (gx) {
                           for (std::size_t o = 0; o < split.outer; ++o) {
                             for (std::size_t j = 0; j < w; ++j) {
                               for (std::size_t i = 0; i < split.inner; ++i) {
                                 gx[(o * w + j) * split.inner + i] +=
                                     g[(o * split.n + offset + j) *
                                           split.inner +
                                       i];
                               }
                             }
                           }
                         }
                         offset += w;
                       }
                     });
}

/// Elements [begin, end) along `axis`.
template <typename T>
Var<T> slice(Var<T> a, int axis, std::size_t begin, std::size_t end) {
  Tape<T>& tape = a.tape();
  tape.check_inputs(Op::kSlice, {a});
  const Tensor<T>& av = a.value();
  const std::size_t ax = normalize_axis(axis, av.rank(), "slice");
  if (begin > end || end > av.shape[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") outside axis of shape " +
                     to_string(av.shape));
  }
  const auto s = detail::split_at(av.shape, ax);
  const std::size_t w = end - begin;
  Shape out_shape = av.shape;
  out_shape[ax] = w;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < w; ++j) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        out[(o * w + j) * s.inner + i] = av[(o * s.n + begin + j) * s.inner + i];
      }
    }
  }
  const std::size_t ia = a.id();
  return tape.record(Op::kSlice, {ia}, std::move(out),
                     [ia, s, w, begin](Tape<T>& t, std::size_t self) {
                       const auto& g = t.out_grad(self);
                       T* gx = t.grad_buffer(ia);
                       if (!gx) return;
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t j = 0; j < w; ++j) {
                           for (std::size_t i = 0; i < s.inner; ++i) {
                             gx[(o * s.n + begin + j) * s.inner + i] +=
                                 g[(o * w + j) * s.inner + i];
                           }
                         }
                       }
                     });
}

/// Explicit broadcast to `shape` under trailing-dimension alignment.
template <typename T>
Var<T> broadcast(Var<T> a, Shape shape) {
  Tape<T>& tape = a.tape();
  tape.check_inputs(Op::kBroadcast, {a});
  const Tensor<T>& av = a.value();
  Shape joined;
  try {
    joined = detail::broadcast_shapes(av.shape, shape, "broadcast");
  } catch (const ShapeError&) {
    joined.clear();
  }
  if (joined != shape) {
    throw ShapeError(detail::shapes_msg<T>(Op::kBroadcast, av.shape, shape));
  }
  auto sa = detail::broadcast_strides(av.shape, shape);
  Tensor<T> out(shape);
  detail::strided_walk(shape, sa, sa,
                       [&](std::size_t o, std::size_t i, std::size_t) {
                         out[o] = av[i];
                       });
  const std::size_t ia = a.id();
  return tape.record(Op::kBroadcast, {ia}, std::move(out),
                     [ia, shape, sa](Tape<T>& t, std::size_t self) {
                       const auto& g = t.out_grad(self);
                       T* gx = t.grad_buffer(ia);
                       if (!gx) return;
                       detail::strided_walk(
                           shape, sa, sa,
                           [&](std::size_t o, std::size_t i, std::size_t) {
                             gx[i] += g[o];
                           });
                     });
}

}  // namespace distilprune
