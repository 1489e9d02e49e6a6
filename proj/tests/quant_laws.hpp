#pragma once

#include <algorithm>
#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "robustbench/robustbench.hpp"

// Randomized checks of the quantizer laws. Each returns a list of violations.
namespace quant_laws {

using robustbench::Graph;
using robustbench::Rng;
using robustbench::Shape;
using robustbench::Tensor;

inline Tensor<float> random_floats(Rng& rng, std::size_t n, double lo, double hi) {
  Tensor<float> t(Shape{n});
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

inline std::size_t distinct(const Tensor<float>& t) { return std::set<float>(t.data().begin(), t.data().end()).size(); }

inline std::vector<std::string> idempotence(int trials = 100) {
  std::vector<std::string> bad;
  Rng rng(101);
  for (int bits = 1; bits < 32; ++bits) {
    for (int t = 0; t < trials; ++t) {
      const double scale = rng.uniform(0.01, 10.0);
      const auto w = random_floats(rng, 64, -scale, scale);
      const auto q = robustbench::quantize_weights(w, bits);
      if (robustbench::quantize_weights(q, bits) != q) bad.push_back("weights bits=" + std::to_string(bits));
      const auto a = random_floats(rng, 64, -0.5, 1.5);
      const auto qa = robustbench::quantize_activations(a, bits);
      if (robustbench::quantize_activations(qa, bits) != qa) bad.push_back("activations bits=" + std::to_string(bits));
    }
  }
  return bad;
}

inline std::vector<std::string> monotonicity(int trials = 100) {
  std::vector<std::string> bad;
  Rng rng(102);
  for (int bits = 1; bits < 32; ++bits) {
    for (int t = 0; t < trials; ++t) {
      auto a = random_floats(rng, 64, -0.5, 1.5);
      std::sort(a.data().begin(), a.data().end());
      const auto q = robustbench::quantize_activations(a, bits);
      if (!std::is_sorted(q.data().begin(), q.data().end())) bad.push_back("activations bits=" + std::to_string(bits));
    }
  }
  return bad;
}

inline std::vector<std::string> level_cardinality(int trials = 50) {
  std::vector<std::string> bad;
  Rng rng(103);
  for (int bits = 1; bits <= 12; ++bits) {
    const std::size_t limit = std::size_t{1} << bits;
    for (int t = 0; t < trials; ++t) {
      const auto w = random_floats(rng, 4096, -1, 1);
      if (distinct(robustbench::quantize_weights(w, bits)) > limit) bad.push_back("weights bits=" + std::to_string(bits));
      const auto a = random_floats(rng, 4096, -0.5, 1.5);
      if (distinct(robustbench::quantize_activations(a, bits)) > limit) {
        bad.push_back("activations bits=" + std::to_string(bits));
      }
      if (distinct(robustbench::quantize_gradients(w, bits, rng)) > limit) {
        bad.push_back("gradients bits=" + std::to_string(bits));
      }
    }
  }
  // Two-bit weights uniform in [-1, 1] use all four levels.
  for (int t = 0; t < 100; ++t) {
    if (distinct(robustbench::quantize_weights(random_floats(rng, 256, -1, 1), 2)) != 4) bad.push_back("2-bit levels != 4");
  }
  return bad;
}

/// The gradient reaching the pre-quantization value equals the gradient at
/// the quantized value (inside [0,1] for activations).
inline std::vector<std::string> ste_passthrough(int trials = 50) {
  namespace ad = robustbench::ad;
  std::vector<std::string> bad;
  Rng rng(104);
  for (int t = 0; t < trials; ++t) {
    const int bits = 1 + t % 8;
    const auto upstream = random_floats(rng, 32, -2, 2);
    {
      Graph<float> g;
      const auto w = g.input(random_floats(rng, 32, -1, 1));
      const auto q = ad::quantize_weights(w, bits);
      g.backward(ad::reduce_sum(ad::multiply(q, g.constant(upstream))));
      if (g.grad(w) != upstream || g.grad(q) != upstream) bad.push_back("weights bits=" + std::to_string(bits));
    }
    {
      Graph<float> g;
      const auto a = g.input(random_floats(rng, 32, -0.5, 1.5));
      const auto q = ad::quantize_activations(a, bits);
      g.backward(ad::reduce_sum(ad::multiply(q, g.constant(upstream))));
      const auto ga = g.grad(a), gq = g.grad(q);
      for (std::size_t i = 0; i < 32; ++i) {
        const float av = a.value()[i];
        const float want = av >= 0.0F && av <= 1.0F ? gq[i] : 0.0F;
        if (ga[i] != want) bad.push_back("activations bits=" + std::to_string(bits));
      }
    }
  }
  return bad;
}

/// bits == 32 returns its input bit for bit, and a model whose QuantSpec is
/// all 32 produces the same logits as an unquantized one.
inline std::vector<std::string> full_precision_exact(int trials = 50) {
  std::vector<std::string> bad;
  Rng rng(105);
  for (int t = 0; t < trials; ++t) {
    const auto w = random_floats(rng, 128, -3, 3);
    if (robustbench::quantize_weights(w, 32) != w) bad.push_back("weights");
    if (robustbench::quantize_activations(w, 32) != w) bad.push_back("activations");
    if (robustbench::quantize_gradients(w, 32, rng) != w) bad.push_back("gradients");
  }
  robustbench::ModelConfig plain;
  plain.kind = robustbench::ModelKind::spheres_mlp;
  plain.input_shape = {2};
  plain.hidden_width = 16;
  robustbench::ModelConfig q32 = plain;
  q32.quantized_layers = {"fc1", "fc2", "out"};
  Rng init(7);
  const auto params = robustbench::init_params<float>(plain, init);
  const auto x = random_floats(rng, 200, -1.5, 1.5).reshaped({100, 2});
  if (robustbench::predict_logits(plain, params, x) != robustbench::predict_logits(q32, params, x)) {
    bad.push_back("model logits");
  }
  return bad;
}

}  // namespace quant_laws
