#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "robustbench/tensor.hpp"

namespace robustbench {

template <typename T>
class Graph;

/// Handle to one value recorded on a Graph.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  std::size_t id() const { return id_; }
  Graph<T>& graph() const { return *graph_; }
  const Tensor<T>& value() const { return graph_->value(*this); }
  const Shape& shape() const { return value().shape(); }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
/// is always topologically sorted and backward is a single reverse sweep.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    std::string name;
    bool requires_grad = false;
    bool trainable = false;
    bool has_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return leaf("constant", std::move(value), false, false, {}); }

  /// A leaf whose gradient is wanted (attack inputs).
  Var<T> input(Tensor<T> value) { return leaf("input", std::move(value), true, false, {}); }

  Var<T> parameter(std::string name, Tensor<T> value, bool trainable = true) {
    return leaf("parameter", std::move(value), trainable, trainable, std::move(name));
  }

  /// Append an operation node. `backward` is invoked with this graph and the
  /// node's own id once the node's upstream gradient is complete.
  Var<T> record(std::string op, const std::vector<Var<T>>& inputs, Tensor<T> value,
                BackwardFn backward) {
    Node node;
    node.op = std::move(op);
    node.value = std::move(value);
    for (const auto& in : inputs) {
      if (&in.graph() != this) throw std::logic_error(node.op + ": input from another graph");
      node.inputs.push_back(in.id());
      node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  const Tensor<T>& value(const Var<T>& v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient of the last backward() loss with respect to `v`; zeros when `v`
  /// did not influence the loss.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id());
    if (n.has_grad) return n.grad;
    return Tensor<T>(n.value.shape());
  }

  /// Upstream gradient of node `id` (valid inside its backward function).
  const Tensor<T>& upstream(std::size_t id) const { return nodes_[id].grad; }

  /// Zero-initialized (on first touch) gradient accumulator for node `id`.
  Tensor<T>& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Runs the reverse sweep from a scalar loss and returns gradients of all
  /// trainable parameters keyed by name.
  std::map<std::string, Tensor<T>> backward(const Var<T>& loss) {
    const Node& l = nodes_.at(loss.id());
    if (l.value.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(l.value.shape()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<T>();
    }
    grad_slot(loss.id())[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.has_grad || !n.backward) continue;
      n.backward(*this, i);
    }
    std::map<std::string, Tensor<T>> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.trainable) out[n.name] = n.has_grad ? n.grad : Tensor<T>(n.value.shape());
    }
    return out;
  }

 private:
  Var<T> leaf(std::string op, Tensor<T> value, bool requires_grad, bool trainable,
              std::string name) {
    Node node;
    node.op = std::move(op);
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.trainable = trainable;
    node.name = std::move(name);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

enum class Padding { same, valid };

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

/// c (+)= op(a) * op(b), all row-major.
template <typename T>
void gemm(const T* a, std::size_t a_rows, std::size_t a_cols, bool trans_a, const T* b,
          std::size_t b_rows, std::size_t b_cols, bool trans_b, T* c, bool accumulate) {
  using Index = Eigen::Index;
  ConstMatrixMap<T> A(a, static_cast<Index>(a_rows), static_cast<Index>(a_cols));
  ConstMatrixMap<T> B(b, static_cast<Index>(b_rows), static_cast<Index>(b_cols));
  const Index m = static_cast<Index>(trans_a ? a_cols : a_rows);
  const Index n = static_cast<Index>(trans_b ? b_rows : b_cols);
  MatrixMap<T> C(c, m, n);
  if (!accumulate) C.setZero();
  if (trans_a && trans_b) {
    C.noalias() += A.transpose() * B.transpose();
  } else if (trans_a) {
    C.noalias() += A.transpose() * B;
  } else if (trans_b) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() += A * B;
  }
}

inline std::size_t same_output(std::size_t in, std::size_t stride) { return (in + stride - 1) / stride; }

struct ConvGeometry {
  std::size_t n, h, w, c;
  std::size_t kh, kw, o;
  std::size_t stride;
  std::size_t pad_top, pad_left;
  std::size_t oh, ow;

  std::size_t patch_rows() const { return n * oh * ow; }
  std::size_t patch_cols() const { return kh * kw * c; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& k, std::size_t stride, Padding padding) {
  if (x.size() != 4 || k.size() != 4 || x[3] != k[2] || stride == 0) {
    throw shape_mismatch("conv2d", x, k);
  }
  ConvGeometry g{x[0], x[1], x[2], x[3], k[0], k[1], k[3], stride, 0, 0, 0, 0};
  if (padding == Padding::same) {
    g.oh = same_output(g.h, stride);
    g.ow = same_output(g.w, stride);
    const std::size_t need_h = (g.oh - 1) * stride + g.kh;
    const std::size_t need_w = (g.ow - 1) * stride + g.kw;
    g.pad_top = need_h > g.h ? (need_h - g.h) / 2 : 0;
    g.pad_left = need_w > g.w ? (need_w - g.w) / 2 : 0;
  } else {
    if (g.kh > g.h || g.kw > g.w) throw shape_mismatch("conv2d", x, k);
    g.oh = (g.h - g.kh) / stride + 1;
    g.ow = (g.w - g.kw) / stride + 1;
  }
  return g;
}

template <typename T>
std::vector<T> im2col(const T* x, const ConvGeometry& g) {
  std::vector<T> patches(g.patch_rows() * g.patch_cols(), T{0});
  std::size_t row = 0;
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox, ++row) {
        T* dst = patches.data() + row * g.patch_cols();
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          for (std::size_t kx = 0; kx < g.kw; ++kx, dst += g.c) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) ||
                ix >= static_cast<std::ptrdiff_t>(g.w)) {
              continue;
            }
            const T* src = x + ((n * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)) * g.c;
            std::copy_n(src, g.c, dst);
          }
        }
      }
    }
  }
  return patches;
}

template <typename T>
void col2im_add(const T* patches, const ConvGeometry& g, T* dx) {
  std::size_t row = 0;
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox, ++row) {
        const T* src = patches + row * g.patch_cols();
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          for (std::size_t kx = 0; kx < g.kw; ++kx, src += g.c) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) ||
                ix >= static_cast<std::ptrdiff_t>(g.w)) {
              continue;
            }
            T* dst = dx + ((n * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)) * g.c;
            for (std::size_t ch = 0; ch < g.c; ++ch) dst[ch] += src[ch];
          }
        }
      }
    }
  }
}

/// True when `suffix` equals the trailing dimensions of `full`.
inline bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

template <typename T, typename F>
Var<T> elementwise(const std::string& op, const Var<T>& x, F f, std::function<T(T, T)> dydx) {
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  return x.graph().record(op, {x}, std::move(y), [dydx](Graph<T>& g, std::size_t self) {
    const std::size_t in = g.node(self).inputs[0];
    if (!g.requires_grad(in)) return;
    const Tensor<T>& up = g.upstream(self);
    const Tensor<T>& xin = g.node(in).value;
    const Tensor<T>& yout = g.node(self).value;
    Tensor<T>& dx = g.grad_slot(in);
    for (std::size_t i = 0; i < up.size(); ++i) dx[i] += up[i] * dydx(xin[i], yout[i]);
  });
}

}  // namespace detail

/// Differentiable primitives. Each validates operand shapes and records a
/// backward rule on the operands' graph.
namespace ad {

/// a + b; b may also match the trailing dimensions of a (bias broadcast).
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b, T b_sign = T{1}) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (!detail::is_suffix(av.shape(), bv.shape()) || bv.size() == 0) {
    throw shape_mismatch(b_sign > 0 ? "add" : "subtract", av.shape(), bv.shape());
  }
  Tensor<T> y = av;
  const std::size_t period = bv.size();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b_sign * bv[i % period];
  return a.graph().record(b_sign > 0 ? "add" : "subtract", {a, b}, std::move(y),
                          [b_sign](Graph<T>& g, std::size_t self) {
                            const auto& ins = g.node(self).inputs;
                            const Tensor<T>& up = g.upstream(self);
                            if (g.requires_grad(ins[0])) {
                              Tensor<T>& da = g.grad_slot(ins[0]);
                              for (std::size_t i = 0; i < up.size(); ++i) da[i] += up[i];
                            }
                            if (g.requires_grad(ins[1])) {
                              Tensor<T>& db = g.grad_slot(ins[1]);
                              const std::size_t period = db.size();
                              for (std::size_t i = 0; i < up.size(); ++i) db[i % period] += b_sign * up[i];
                            }
                          });
}

template <typename T>
Var<T> subtract(const Var<T>& a, const Var<T>& b) {
  return add(a, b, T{-1});
}

template <typename T>
Var<T> multiply(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.shape() != bv.shape()) throw shape_mismatch("multiply", av.shape(), bv.shape());
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return a.graph().record("multiply", {a, b}, std::move(y), [](Graph<T>& g, std::size_t self) {
    const auto& ins = g.node(self).inputs;
    const Tensor<T>& up = g.upstream(self);
    const Tensor<T>& av = g.node(ins[0]).value;
    const Tensor<T>& bv = g.node(ins[1]).value;
    if (g.requires_grad(ins[0])) {
      Tensor<T>& da = g.grad_slot(ins[0]);
      for (std::size_t i = 0; i < up.size(); ++i) da[i] += up[i] * bv[i];
    }
    if (g.requires_grad(ins[1])) {
      Tensor<T>& db = g.grad_slot(ins[1]);
      for (std::size_t i = 0; i < up.size(); ++i) db[i] += up[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::elementwise<T>("scale", x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

/// [m,k] x [k,n] -> [m,n]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw shape_mismatch("matmul", av.shape(), bv.shape());
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> y(Shape{m, n});
  detail::gemm(av.raw(), m, k, false, bv.raw(), k, n, false, y.raw(), false);
  return a.graph().record("matmul", {a, b}, std::move(y), [m, k, n](Graph<T>& g, std::size_t self) {
    const auto& ins = g.node(self).inputs;
    const Tensor<T>& up = g.upstream(self);
    if (g.requires_grad(ins[0])) {
      detail::gemm(up.raw(), m, n, false, g.node(ins[1]).value.raw(), k, n, true,
                   g.grad_slot(ins[0]).raw(), true);
    }
    if (g.requires_grad(ins[1])) {
      detail::gemm(g.node(ins[0]).value.raw(), m, k, true, up.raw(), m, n, false,
                   g.grad_slot(ins[1]).raw(), true);
    }
  });
}

/// NHWC input, HWIO kernel. SAME output extent is ceil(in / stride); VALID is
/// floor((in - k) / stride) + 1.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t stride, Padding padding) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& kv = kernel.value();
  const detail::ConvGeometry geo = detail::conv_geometry(xv.shape(), kv.shape(), stride, padding);
  auto patches = std::make_shared<std::vector<T>>(detail::im2col(xv.raw(), geo));
  Tensor<T> y(Shape{geo.n, geo.oh, geo.ow, geo.o});
  detail::gemm(patches->data(), geo.patch_rows(), geo.patch_cols(), false, kv.raw(), geo.patch_cols(),
               geo.o, false, y.raw(), false);
  return x.graph().record("conv2d", {x, kernel}, std::move(y), [geo, patches](Graph<T>& g, std::size_t self) {
    const auto& ins = g.node(self).inputs;
    const Tensor<T>& up = g.upstream(self);
    if (g.requires_grad(ins[1])) {
      detail::gemm(patches->data(), geo.patch_rows(), geo.patch_cols(), true, up.raw(), geo.patch_rows(),
                   geo.o, false, g.grad_slot(ins[1]).raw(), true);
    }
    if (g.requires_grad(ins[0])) {
      std::vector<T> dpatches(geo.patch_rows() * geo.patch_cols());
      detail::gemm(up.raw(), geo.patch_rows(), geo.o, false, g.node(ins[1]).value.raw(), geo.patch_cols(),
                   geo.o, true, dpatches.data(), false);
      detail::col2im_add(dpatches.data(), geo, g.grad_slot(ins[0]).raw());
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::elementwise<T>(
      "relu", x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
T sigmoid_value(T z) {
  if (z >= T{0}) return T{1} / (T{1} + std::exp(-z));
  const T e = std::exp(z);
  return e / (T{1} + e);
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::elementwise<T>(
      "sigmoid", x, [](T v) { return sigmoid_value(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return detail::elementwise<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

/// Sign with sign(0) = 0. Has zero gradient everywhere; a straight-through
/// rule must be attached explicitly by the caller.
template <typename T>
Var<T> sign(const Var<T>& x) {
  return detail::elementwise<T>(
      "sign", x, [](T v) { return T((v > T{0}) - (v < T{0})); }, [](T, T) { return T{0}; });
}

template <typename T>
Var<T> clip(const Var<T>& x, T lo, T hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clip: lo > hi");
  return detail::elementwise<T>(
      "clip", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T{1} : T{0}; });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  return x.graph().record("reshape", {x}, std::move(y), [](Graph<T>& g, std::size_t self) {
    const std::size_t in = g.node(self).inputs[0];
    if (!g.requires_grad(in)) return;
    const Tensor<T>& up = g.upstream(self);
    Tensor<T>& dx = g.grad_slot(in);
    for (std::size_t i = 0; i < up.size(); ++i) dx[i] += up[i];
  });
}

/// Softmax over the last axis.
template <typename T>
Var<T> softmax(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("softmax: needs rank >= 1");
  const std::size_t c = xv.shape().back();
  Tensor<T> y(xv.shape());
  for (std::size_t r = 0; r < xv.size() / c; ++r) {
    const T* in = xv.raw() + r * c;
    T* out = y.raw() + r * c;
    const T mx = *std::max_element(in, in + c);
    T sum{0};
    for (std::size_t j = 0; j < c; ++j) sum += out[j] = std::exp(in[j] - mx);
    for (std::size_t j = 0; j < c; ++j) out[j] /= sum;
  }
  return x.graph().record("softmax", {x}, std::move(y), [c](Graph<T>& g, std::size_t self) {
    const std::size_t in = g.node(self).inputs[0];
    if (!g.requires_grad(in)) return;
    const Tensor<T>& up = g.upstream(self);
    const Tensor<T>& yv = g.node(self).value;
    Tensor<T>& dx = g.grad_slot(in);
    for (std::size_t r = 0; r < up.size() / c; ++r) {
      T dot{0};
      for (std::size_t j = 0; j < c; ++j) dot += up[r * c + j] * yv[r * c + j];
      for (std::size_t j = 0; j < c; ++j) dx[r * c + j] += yv[r * c + j] * (up[r * c + j] - dot);
    }
  });
}

/// Elementwise max(z,0) - z*y + log(1 + exp(-|z|)); targets are constants.
template <typename T>
Var<T> sigmoid_cross_entropy(const Var<T>& logits, const Tensor<T>& targets) {
  const Tensor<T>& z = logits.value();
  if (z.shape() != targets.shape()) throw shape_mismatch("sigmoid_cross_entropy", z.shape(), targets.shape());
  Tensor<T> y(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    y[i] = std::max(z[i], T{0}) - z[i] * targets[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  return logits.graph().record("sigmoid_cross_entropy", {logits}, std::move(y),
                               [targets](Graph<T>& g, std::size_t self) {
                                 const std::size_t in = g.node(self).inputs[0];
                                 if (!g.requires_grad(in)) return;
                                 const Tensor<T>& up = g.upstream(self);
                                 const Tensor<T>& z = g.node(in).value;
                                 Tensor<T>& dz = g.grad_slot(in);
                                 for (std::size_t i = 0; i < up.size(); ++i) {
                                   dz[i] += up[i] * (sigmoid_value(z[i]) - targets[i]);
                                 }
                               });
}

/// Per-row cross entropy of softmax(logits) against integer labels:
/// [N,C] logits -> [N] losses.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const Tensor<T>& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != labels.size()) {
    throw shape_mismatch("softmax_cross_entropy", z.shape(), Shape{labels.size()});
  }
  const std::size_t n = z.dim(0), c = z.dim(1);
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= c) {
      throw std::invalid_argument("softmax_cross_entropy: label out of range");
    }
  }
  auto probs = std::make_shared<std::vector<T>>(n * c);
  Tensor<T> y(Shape{n});
  for (std::size_t r = 0; r < n; ++r) {
    const T* in = z.raw() + r * c;
    const T mx = *std::max_element(in, in + c);
    T sum{0};
    for (std::size_t j = 0; j < c; ++j) sum += (*probs)[r * c + j] = std::exp(in[j] - mx);
    for (std::size_t j = 0; j < c; ++j) (*probs)[r * c + j] /= sum;
    y[r] = mx + std::log(sum) - in[labels[r]];
  }
  return logits.graph().record("softmax_cross_entropy", {logits}, std::move(y),
                               [probs, labels, c](Graph<T>& g, std::size_t self) {
                                 const std::size_t in = g.node(self).inputs[0];
                                 if (!g.requires_grad(in)) return;
                                 const Tensor<T>& up = g.upstream(self);
                                 Tensor<T>& dz = g.grad_slot(in);
                                 for (std::size_t r = 0; r < up.size(); ++r) {
                                   for (std::size_t j = 0; j < c; ++j) {
                                     const T onehot = static_cast<std::size_t>(labels[r]) == j ? T{1} : T{0};
                                     dz[r * c + j] += up[r] * ((*probs)[r * c + j] - onehot);
                                   }
                                 }
                               });
}

template <typename T>
Var<T> reduce_sum(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  T sum{0};
  for (T v : xv.data()) sum += v;
  return x.graph().record("reduce_sum", {x}, Tensor<T>::scalar(sum), [](Graph<T>& g, std::size_t self) {
    const std::size_t in = g.node(self).inputs[0];
    if (!g.requires_grad(in)) return;
    const T up = g.upstream(self)[0];
    Tensor<T>& dx = g.grad_slot(in);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += up;
  });
}

template <typename T>
Var<T> reduce_mean(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  if (xv.size() == 0) throw ShapeError("reduce_mean: empty tensor");
  T sum{0};
  for (T v : xv.data()) sum += v;
  const T inv = T{1} / static_cast<T>(xv.size());
  return x.graph().record("reduce_mean", {x}, Tensor<T>::scalar(sum * inv), [inv](Graph<T>& g, std::size_t self) {
    const std::size_t in = g.node(self).inputs[0];
    if (!g.requires_grad(in)) return;
    const T up = g.upstream(self)[0] * inv;
    Tensor<T>& dx = g.grad_slot(in);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += up;
  });
}

/// Per-example standardization: each row of the leading axis becomes
/// (x - mean) / max(stddev, 1/sqrt(count)).
template <typename T>
Var<T> standardize_per_example(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("standardize_per_example: needs rank >= 2, got " + shape_str(xv.shape()));
  const std::size_t rows = xv.dim(0);
  const std::size_t n = rows ? xv.size() / rows : 0;
  const T floor_std = T{1} / std::sqrt(static_cast<T>(n));
  auto scale = std::make_shared<std::vector<T>>(rows);
  auto floored = std::make_shared<std::vector<bool>>(rows);
  Tensor<T> y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.raw() + r * n;
    T mean{0};
    for (std::size_t i = 0; i < n; ++i) mean += in[i];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t i = 0; i < n; ++i) var += (in[i] - mean) * (in[i] - mean);
    const T sd = std::sqrt(var / static_cast<T>(n));
    (*floored)[r] = sd <= floor_std;
    (*scale)[r] = (*floored)[r] ? floor_std : sd;
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] = (in[i] - mean) / (*scale)[r];
  }
  return x.graph().record("standardize_per_example", {x}, std::move(y),
                          [n, scale, floored](Graph<T>& g, std::size_t self) {
                            const std::size_t in = g.node(self).inputs[0];
                            if (!g.requires_grad(in)) return;
                            const Tensor<T>& up = g.upstream(self);
                            const Tensor<T>& yv = g.node(self).value;
                            Tensor<T>& dx = g.grad_slot(in);
                            for (std::size_t r = 0; r < scale->size(); ++r) {
                              T mean_up{0}, mean_up_y{0};
                              for (std::size_t i = 0; i < n; ++i) {
                                mean_up += up[r * n + i];
                                mean_up_y += up[r * n + i] * yv[r * n + i];
                              }
                              mean_up /= static_cast<T>(n);
                              mean_up_y /= static_cast<T>(n);
                              if ((*floored)[r]) mean_up_y = T{0};
                              for (std::size_t i = 0; i < n; ++i) {
                                dx[r * n + i] += (up[r * n + i] - mean_up - yv[r * n + i] * mean_up_y) / (*scale)[r];
                              }
                            }
                          });
}

/// Running statistics owned by the model; updated only in training mode.
template <typename T>
struct BatchNormStats {
  Tensor<T>* mean = nullptr;
  Tensor<T>* var = nullptr;
  T momentum = T(0.9);
  T epsilon = T(1e-5);
};

enum class NormMode { train, train_frozen, eval };

/// Per-channel batch normalization over every axis but the last.
/// `train` uses batch statistics and updates the running averages,
/// `train_frozen` uses batch statistics without touching them and `eval` uses
/// the running averages.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T> stats,
                  NormMode mode) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("batch_norm: needs rank >= 2, got " + shape_str(xv.shape()));
  const std::size_t c = xv.shape().back();
  const std::size_t m = xv.size() / c;
  if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c}) {
    throw shape_mismatch("batch_norm", xv.shape(), gamma.value().shape());
  }
  const bool use_batch = mode != NormMode::eval;
  if (!use_batch && (stats.mean == nullptr || stats.var == nullptr)) {
    throw std::invalid_argument("batch_norm: eval mode needs running statistics");
  }
  std::vector<T> mean(c, T{0}), var(c, T{0});
  if (use_batch) {
    for (std::size_t i = 0; i < xv.size(); ++i) mean[i % c] += xv[i];
    for (auto& v : mean) v /= static_cast<T>(m);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T d = xv[i] - mean[i % c];
      var[i % c] += d * d;
    }
    for (auto& v : var) v /= static_cast<T>(m);
    if (mode == NormMode::train && stats.mean && stats.var) {
      for (std::size_t j = 0; j < c; ++j) {
        (*stats.mean)[j] = stats.momentum * (*stats.mean)[j] + (T{1} - stats.momentum) * mean[j];
        (*stats.var)[j] = stats.momentum * (*stats.var)[j] + (T{1} - stats.momentum) * var[j];
      }
    }
  } else {
    std::copy_n(stats.mean->raw(), c, mean.begin());
    std::copy_n(stats.var->raw(), c, var.begin());
  }
  auto inv_std = std::make_shared<std::vector<T>>(c);
  for (std::size_t j = 0; j < c; ++j) (*inv_std)[j] = T{1} / std::sqrt(var[j] + stats.epsilon);
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  Tensor<T> y(xv.shape());
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const std::size_t j = i % c;
    (*xhat)[i] = (xv[i] - mean[j]) * (*inv_std)[j];
    y[i] = gv[j] * (*xhat)[i] + bv[j];
  }
  return x.graph().record(
      "batch_norm", {x, gamma, beta}, std::move(y), [c, m, use_batch, inv_std, xhat](Graph<T>& g, std::size_t self) {
        const auto& ins = g.node(self).inputs;
        const Tensor<T>& up = g.upstream(self);
        std::vector<T> sum_dy(c, T{0}), sum_dy_xhat(c, T{0});
        for (std::size_t i = 0; i < up.size(); ++i) {
          sum_dy[i % c] += up[i];
          sum_dy_xhat[i % c] += up[i] * (*xhat)[i];
        }
        if (g.requires_grad(ins[1])) {
          Tensor<T>& dg = g.grad_slot(ins[1]);
          for (std::size_t j = 0; j < c; ++j) dg[j] += sum_dy_xhat[j];
        }
        if (g.requires_grad(ins[2])) {
          Tensor<T>& db = g.grad_slot(ins[2]);
          for (std::size_t j = 0; j < c; ++j) db[j] += sum_dy[j];
        }
        if (g.requires_grad(ins[0])) {
          const Tensor<T>& gv = g.node(ins[1]).value;
          Tensor<T>& dx = g.grad_slot(ins[0]);
          const T mm = static_cast<T>(m);
          for (std::size_t i = 0; i < up.size(); ++i) {
            const std::size_t j = i % c;
            if (use_batch) {
              dx[i] += gv[j] * (*inv_std)[j] / mm * (mm * up[i] - sum_dy[j] - (*xhat)[i] * sum_dy_xhat[j]);
            } else {
              dx[i] += gv[j] * (*inv_std)[j] * up[i];
            }
          }
        }
      });
}

}  // namespace ad
}  // namespace robustbench
