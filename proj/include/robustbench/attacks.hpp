#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "robustbench/autodiff.hpp"
#include "robustbench/models.hpp"
#include "robustbench/random.hpp"
#include "robustbench/tensor.hpp"

namespace robustbench {

enum class AttackKind { fgsm, pgd, constant_offset, nonexample_ascent };

inline std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::constant_offset: return "constant_offset";
    case AttackKind::nonexample_ascent: return "nonexample_ascent";
  }
  return "?";
}

inline AttackKind parse_attack_kind(const std::string& s) {
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "pgd") return AttackKind::pgd;
  if (s == "constant_offset") return AttackKind::constant_offset;
  if (s == "nonexample_ascent") return AttackKind::nonexample_ascent;
  throw std::invalid_argument("unknown attack kind '" + s + "'");
}

struct AttackConfig {
  AttackKind kind = AttackKind::fgsm;
  double epsilon = 0.1;
  double step_size = 0.01;
  int iterations = 40;
  bool random_init = true;
  double clip_lo = 0.0;
  double clip_hi = 1.0;
  std::uint64_t seed = 0;
  /// Non-example start noise.
  double noise_sigma = 0.1;

  void validate() const {
    if (!(epsilon >= 0)) throw std::invalid_argument("attack: epsilon must be >= 0");
    if (!(step_size > 0)) throw std::invalid_argument("attack: step_size must be > 0");
    if (iterations < 0 || (kind == AttackKind::pgd && iterations < 1)) {
      throw std::invalid_argument("attack: iterations must be >= 1");
    }
    if (!(clip_lo < clip_hi)) throw std::invalid_argument("attack: clip range is empty");
    if (!(noise_sigma >= 0)) throw std::invalid_argument("attack: noise_sigma must be >= 0");
  }

  /// PGD whose total travel cannot reach the ball surface.
  bool underpowered() const {
    return kind == AttackKind::pgd && static_cast<double>(iterations) * step_size < epsilon;
  }
};

/// Largest L2 norm of a perturbation with L-inf norm eps_inf in n dimensions.
inline double linf_to_l2_bound(std::size_t n, double eps_inf) {
  if (n == 0) throw std::invalid_argument("linf_to_l2_bound: n must be >= 1");
  return std::sqrt(static_cast<double>(n)) * eps_inf;
}

namespace detail {

template <typename T>
T sign_of(T v) {
  return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0});
}

/// Gradient of sum_i objective_i with respect to the input batch. The
/// objective is the per-example training loss; `negate` flips it to the
/// target log-probability used by non-example ascent.
template <typename T>
Tensor<T> input_gradient(const ModelConfig& cfg, const ParamSet<T>& params, const Tensor<T>& x,
                         const std::vector<int>& labels, NormMode norm, bool negate = false) {
  Graph<T> g;
  const Var<T> in = g.input(x);
  ForwardOptions opts;
  opts.norm = norm;
  // Attack graphs never touch running statistics (eval or train_frozen).
  ParamSet<T>& p = const_cast<ParamSet<T>&>(params);
  const Var<T> logits = forward(cfg, p, g, in, opts);
  Var<T> loss = ad::reduce_sum(per_example_loss(cfg, logits, labels));
  if (negate) loss = ad::scale(loss, T{-1});
  g.backward(loss);
  return g.grad(in);
}

/// Bounds of the epsilon ball around v in T, pulled inward where rounding
/// would put them farther than epsilon from v.
template <typename T>
std::pair<T, T> ball_bounds(T v, double epsilon) {
  const T eps = static_cast<T>(epsilon);
  T lo = v - eps, hi = v + eps;
  while (static_cast<double>(v) - static_cast<double>(lo) > epsilon) lo = std::nextafter(lo, v);
  while (static_cast<double>(hi) - static_cast<double>(v) > epsilon) hi = std::nextafter(hi, v);
  return {lo, hi};
}

template <typename T>
void check_norm_mode(NormMode norm) {
  if (norm == NormMode::train) throw std::invalid_argument("attacks must not update batch-norm statistics");
}

}  // namespace detail

/// x + eps * sign(grad_x J), clipped to [lo, hi]. sign(0) = 0. The step is
/// kept inside the ball exactly, even where float rounding would overshoot.
template <typename T>
Tensor<T> fgsm(const ModelConfig& cfg, const ParamSet<T>& params, const Tensor<T>& x, const std::vector<int>& labels,
               double epsilon, double lo, double hi, NormMode norm = NormMode::eval) {
  detail::check_norm_mode<T>(norm);
  if (!(epsilon >= 0)) throw std::invalid_argument("fgsm: epsilon must be >= 0");
  if (epsilon == 0) return x;
  const Tensor<T> grad = detail::input_gradient(cfg, params, x, labels, norm);
  const T eps = static_cast<T>(epsilon);
  const T clo = static_cast<T>(lo), chi = static_cast<T>(hi);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto [blo, bhi] = detail::ball_bounds(x[i], epsilon);
    out[i] = std::clamp(std::clamp(x[i] + eps * detail::sign_of(grad[i]), blo, bhi), clo, chi);
  }
  return out;
}

/// Projected sign-gradient ascent on J inside the L-inf ball around x. Each
/// iteration: step, clamp to the ball, clip to the pixel range. The random
/// start for example i draws from Rng(seed + i).
template <typename T>
Tensor<T> pgd(const ModelConfig& cfg, const ParamSet<T>& params, const Tensor<T>& x, const std::vector<int>& labels,
              const AttackConfig& attack, NormMode norm = NormMode::eval) {
  detail::check_norm_mode<T>(norm);
  attack.validate();
  const T eps = static_cast<T>(attack.epsilon);
  const T step = static_cast<T>(attack.step_size);
  const T clo = static_cast<T>(attack.clip_lo), chi = static_cast<T>(attack.clip_hi);
  const std::size_t n = x.shape().empty() ? 1 : x.dim(0);
  const std::size_t stride = n == 0 ? 0 : x.size() / n;

  std::vector<T> ball_lo(x.size()), ball_hi(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) std::tie(ball_lo[i], ball_hi[i]) = detail::ball_bounds(x[i], attack.epsilon);

  Tensor<T> cur = x;
  if (attack.random_init && eps > T{0}) {
    for (std::size_t e = 0; e < n; ++e) {
      Rng rng = Rng::derived(attack.seed, e);
      for (std::size_t j = e * stride; j < (e + 1) * stride; ++j) {
        const T start = std::clamp(x[j] + static_cast<T>(rng.uniform(-attack.epsilon, attack.epsilon)), ball_lo[j], ball_hi[j]);
        cur[j] = std::clamp(start, clo, chi);
      }
    }
  }
  for (int it = 0; it < attack.iterations; ++it) {
    const Tensor<T> grad = detail::input_gradient(cfg, params, cur, labels, norm);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const T moved = std::clamp(cur[i] + step * detail::sign_of(grad[i]), ball_lo[i], ball_hi[i]);
      cur[i] = std::clamp(moved, clo, chi);
    }
  }
  return cur;
}

/// clip(x + c) elementwise.
template <typename T>
Tensor<T> constant_offset(const Tensor<T>& x, double c, double lo, double hi) {
  Tensor<T> out(x.shape());
  const T off = static_cast<T>(c), clo = static_cast<T>(lo), chi = static_cast<T>(hi);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i] + off, clo, chi);
  return out;
}

template <typename T>
struct NonExample {
  int target = 0;
  Tensor<T> image;
  /// Max softmax probability of the final image.
  double confidence = 0.0;
  int predicted = 0;
  /// Probability assigned to the target class.
  double target_probability = 0.0;
};

/// Gradient-sign ascent on log p(target | x) from clipped N(0, sigma^2) noise.
/// One example per target class; target t draws its start from Rng(seed + t).
template <typename T>
std::vector<NonExample<T>> nonexample_ascent(const ModelConfig& cfg, const ParamSet<T>& params,
                                             const std::vector<int>& targets, const AttackConfig& attack) {
  attack.validate();
  const std::size_t classes = cfg.kind == ModelKind::logistic_regression ? 2 : static_cast<std::size_t>(cfg.class_count);
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw std::invalid_argument("nonexample_ascent: target class " + std::to_string(t) + " out of range");
    }
  }
  const std::size_t stride = shape_size(cfg.input_shape);
  Shape shape{targets.size()};
  shape.insert(shape.end(), cfg.input_shape.begin(), cfg.input_shape.end());
  Tensor<T> x(shape);
  const T clo = static_cast<T>(attack.clip_lo), chi = static_cast<T>(attack.clip_hi);
  for (std::size_t e = 0; e < targets.size(); ++e) {
    Rng rng = Rng::derived(attack.seed, static_cast<std::uint64_t>(targets[e]));
    for (std::size_t j = 0; j < stride; ++j) {
      x[e * stride + j] = std::clamp(static_cast<T>(rng.normal(0.0, attack.noise_sigma)), clo, chi);
    }
  }
  const T step = static_cast<T>(attack.step_size);
  for (int it = 0; it < attack.iterations; ++it) {
    const Tensor<T> grad = detail::input_gradient(cfg, params, x, targets, NormMode::eval, true);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i] + step * detail::sign_of(grad[i]), clo, chi);
  }
  const Tensor<T> probs = class_probabilities(cfg, predict_logits(cfg, params, x));
  std::vector<NonExample<T>> out;
  for (std::size_t e = 0; e < targets.size(); ++e) {
    NonExample<T> ne;
    ne.target = targets[e];
    ne.image = x.rows(e, e + 1).reshaped(cfg.input_shape);
    const T* row = probs.raw() + e * classes;
    const auto best = std::max_element(row, row + classes);
    ne.confidence = static_cast<double>(*best);
    ne.predicted = static_cast<int>(best - row);
    ne.target_probability = static_cast<double>(row[targets[e]]);
    out.push_back(std::move(ne));
  }
  return out;
}

}  // namespace robustbench
