#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "robustbench/autodiff.hpp"
#include "robustbench/random.hpp"
#include "robustbench/tensor.hpp"

namespace robustbench {

/// Bit widths for weights, activations and gradients. 32 means "leave in
/// floating point" for that field.
struct QuantSpec {
  int weight_bits = 32;
  int activation_bits = 32;
  int gradient_bits = 32;
  double prune_fraction = 0.0;

  bool quantizes_weights() const { return weight_bits < 32; }
  bool quantizes_activations() const { return activation_bits < 32; }
  bool quantizes_gradients() const { return gradient_bits < 32; }
  bool any() const { return quantizes_weights() || quantizes_activations() || quantizes_gradients(); }

  void validate() const;
};

inline void check_bits(int bits, const char* what) {
  if (bits < 1 || bits > 32) {
    throw std::invalid_argument(std::string(what) + ": bits must be in 1..32, got " + std::to_string(bits));
  }
}

inline void QuantSpec::validate() const {
  check_bits(weight_bits, "weight_bits");
  check_bits(activation_bits, "activation_bits");
  check_bits(gradient_bits, "gradient_bits");
  if (!(prune_fraction >= 0.0 && prune_fraction < 1.0)) {
    throw std::invalid_argument("prune_fraction must be in [0,1)");
  }
}

namespace detail {

template <typename T>
T level_count(int bits) {
  return static_cast<T>((std::uint64_t{1} << bits) - 1);
}

/// Round v*n to the nearest integer level, ties toward +inf.
template <typename T>
T round_to_levels(T v, T n) {
  return std::floor(v * n + T(0.5)) / n;
}

template <typename T>
using Accumulator = std::conditional_t<std::is_same_v<T, float>, double, long double>;

}  // namespace detail

/// k-bit weight quantizer.
///   bits == 32: identity.
///   bits == 1 : sign(w) * mean|w| (sign(0) taken as +1 so at most two levels).
///   otherwise : w / (2 max|w|) + 1/2 is rounded onto 2^k - 1 uniform steps in
///               [0,1] and mapped back to [-max|w|, max|w|].
template <typename T>
Tensor<T> quantize_weights(const Tensor<T>& w, int bits) {
  check_bits(bits, "quantize_weights");
  if (bits == 32 || w.size() == 0) return w;
  Tensor<T> out(w.shape());
  if (bits == 1) {
    detail::Accumulator<T> acc = 0;
    for (T v : w.data()) acc += std::abs(v);
    const T scale = static_cast<T>(acc / static_cast<detail::Accumulator<T>>(w.size()));
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] < T{0} ? -scale : scale;
    return out;
  }
  using Acc = detail::Accumulator<T>;
  const Acc n = detail::level_count<Acc>(bits);
  const Acc m = max_abs(w);
  if (m == Acc{0}) return out;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const Acc unit = static_cast<Acc>(w[i]) / (Acc{2} * m) + Acc(0.5);
    out[i] = static_cast<T>(m * (Acc{2} * detail::round_to_levels(unit, n) - Acc{1}));
  }
  return out;
}

/// Clip to [0,1] and round onto 2^k - 1 uniform steps. bits == 32 passes the
/// input through unclipped.
template <typename T>
Tensor<T> quantize_activations(const Tensor<T>& a, int bits) {
  check_bits(bits, "quantize_activations");
  if (bits == 32) return a;
  const T n = detail::level_count<T>(bits);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = detail::round_to_levels(std::clamp(a[i], T{0}, T{1}), n);
  }
  return out;
}

/// Stochastic k-bit gradient quantizer: g is mapped to [0,1] by 2 max|g|,
/// dithered with uniform noise of one step width, rounded, and mapped back.
/// Unbiased in expectation.
template <typename T>
Tensor<T> quantize_gradients(const Tensor<T>& g, int bits, Rng& rng) {
  check_bits(bits, "quantize_gradients");
  if (bits == 32) return g;
  const T m = max_abs(g);
  if (m == T{0}) return g;
  const T n = detail::level_count<T>(bits);
  Tensor<T> out(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const T noise = static_cast<T>(rng.uniform(-0.5, 0.5)) / n;
    const T unit = g[i] / (T{2} * m) + T(0.5) + noise;
    out[i] = T{2} * m * (detail::round_to_levels(unit, n) - T(0.5));
  }
  return out;
}

/// {0,1} mask that zeroes the floor(fraction * size) smallest-magnitude
/// entries (ties broken by position).
template <typename T>
Tensor<T> prune_mask(const Tensor<T>& w, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("prune: fraction must be in [0,1)");
  Tensor<T> mask(w.shape(), T{1});
  const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(w.size())));
  if (count == 0) return mask;
  std::vector<std::size_t> order(w.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&w](std::size_t a, std::size_t b) { return std::abs(w[a]) < std::abs(w[b]); });
  for (std::size_t i = 0; i < count; ++i) mask[order[i]] = T{0};
  return mask;
}

template <typename T>
Tensor<T> apply_mask(const Tensor<T>& w, const Tensor<T>& mask) {
  if (w.shape() != mask.shape()) throw shape_mismatch("apply_mask", w.shape(), mask.shape());
  Tensor<T> out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] * mask[i];
  return out;
}

template <typename T>
Tensor<T> prune(const Tensor<T>& w, double fraction) {
  return apply_mask(w, prune_mask(w, fraction));
}

/// Graph nodes with straight-through backward rules.
namespace ad {

/// Forward: quantize_weights. Backward: identity.
template <typename T>
Var<T> quantize_weights(const Var<T>& w, int bits) {
  check_bits(bits, "quantize_weights");
  if (bits == 32) return w;
  return w.graph().record("quantize_weights", {w}, robustbench::quantize_weights(w.value(), bits),
                          [](Graph<T>& g, std::size_t self) {
                            const std::size_t in = g.node(self).inputs[0];
                            if (!g.requires_grad(in)) return;
                            const Tensor<T>& up = g.upstream(self);
                            Tensor<T>& dw = g.grad_slot(in);
                            for (std::size_t i = 0; i < up.size(); ++i) dw[i] += up[i];
                          });
}

/// Forward: quantize_activations. Backward: identity inside [0,1], zero outside.
template <typename T>
Var<T> quantize_activations(const Var<T>& a, int bits) {
  check_bits(bits, "quantize_activations");
  if (bits == 32) return a;
  return a.graph().record("quantize_activations", {a}, robustbench::quantize_activations(a.value(), bits),
                          [](Graph<T>& g, std::size_t self) {
                            const std::size_t in = g.node(self).inputs[0];
                            if (!g.requires_grad(in)) return;
                            const Tensor<T>& up = g.upstream(self);
                            const Tensor<T>& av = g.node(in).value;
                            Tensor<T>& da = g.grad_slot(in);
                            for (std::size_t i = 0; i < up.size(); ++i) {
                              if (av[i] >= T{0} && av[i] <= T{1}) da[i] += up[i];
                            }
                          });
}

/// Identity forward; the gradient passing back through this node is
/// quantized with quantize_gradients. A null rng disables quantization.
template <typename T>
Var<T> quantize_gradients(const Var<T>& x, int bits, Rng* rng) {
  check_bits(bits, "quantize_gradients");
  if (bits == 32 || rng == nullptr) return x;
  return x.graph().record("quantize_gradients", {x}, x.value(), [bits, rng](Graph<T>& g, std::size_t self) {
    const std::size_t in = g.node(self).inputs[0];
    if (!g.requires_grad(in)) return;
    const Tensor<T> q = robustbench::quantize_gradients(g.upstream(self), bits, *rng);
    Tensor<T>& dx = g.grad_slot(in);
    for (std::size_t i = 0; i < q.size(); ++i) dx[i] += q[i];
  });
}

}  // namespace ad
}  // namespace robustbench
