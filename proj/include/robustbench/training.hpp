#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "robustbench/attacks.hpp"
#include "robustbench/datasets.hpp"
#include "robustbench/models.hpp"
#include "robustbench/quantization.hpp"
#include "robustbench/random.hpp"
#include "robustbench/tensor.hpp"

#if defined(__SSE__) || defined(_M_X64)
#include <xmmintrin.h>
#endif

namespace robustbench {

/// Flush denormals to zero on this thread. Heavily decayed weights otherwise
/// drift into the subnormal range and slow every matmul by orders of magnitude.
inline void enable_flush_to_zero() {
#if defined(__SSE__) || defined(_M_X64)
  _mm_setcsr(_mm_getcsr() | 0x8040);
#endif
}

enum class OptimizerKind { sgd, adam };
enum class DecayKind { none, l1, l2 };
enum class AdversaryKind { none, fgsm, pgd };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline std::string to_string(DecayKind k) {
  switch (k) {
    case DecayKind::none: return "none";
    case DecayKind::l1: return "l1";
    case DecayKind::l2: return "l2";
  }
  return "?";
}

inline std::string to_string(AdversaryKind k) {
  switch (k) {
    case AdversaryKind::none: return "none";
    case AdversaryKind::fgsm: return "fgsm";
    case AdversaryKind::pgd: return "pgd";
  }
  return "?";
}

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

inline DecayKind parse_decay(const std::string& s) {
  if (s == "none") return DecayKind::none;
  if (s == "l1" || s == "L1") return DecayKind::l1;
  if (s == "l2" || s == "L2") return DecayKind::l2;
  throw std::invalid_argument("unknown decay '" + s + "'");
}

inline AdversaryKind parse_adversary(const std::string& s) {
  if (s == "none") return AdversaryKind::none;
  if (s == "fgsm") return AdversaryKind::fgsm;
  if (s == "pgd") return AdversaryKind::pgd;
  throw std::invalid_argument("unknown adversary '" + s + "'");
}

struct AdversaryConfig {
  AdversaryKind kind = AdversaryKind::none;
  double epsilon = 0.1;
  int steps = 40;
  double step_size = 0.01;
  bool random_init = true;
  /// Share of each batch replaced by adversarial examples.
  double fraction = 1.0;
};

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t batch_size = 128;
  std::size_t total_steps = 1000;
  DecayKind decay = DecayKind::none;
  double decay_lambda = 0.0;
  /// Layers whose weights are decayed; empty means every layer.
  std::vector<std::string> decay_scope;
  AdversaryConfig adversary;
  std::uint64_t seed = 0;
  std::size_t log_interval = 100;

  void validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("train: learning_rate must be > 0");
    if (batch_size == 0) throw std::invalid_argument("train: batch_size must be > 0");
    if (!(decay_lambda >= 0)) throw std::invalid_argument("train: decay lambda must be >= 0");
    if (log_interval == 0) throw std::invalid_argument("train: log_interval must be > 0");
    if (adversary.kind != AdversaryKind::none) {
      if (!(adversary.epsilon > 0)) throw std::invalid_argument("train: adversary epsilon must be > 0");
      if (!(adversary.step_size > 0)) throw std::invalid_argument("train: pgd step_size must be > 0");
      if (adversary.kind == AdversaryKind::pgd && adversary.steps < 1) {
        throw std::invalid_argument("train: pgd steps must be >= 1");
      }
      if (!(adversary.fraction > 0 && adversary.fraction <= 1)) {
        throw std::invalid_argument("train: adversary fraction must be in (0,1]");
      }
    }
  }

  bool decays(const std::string& param_name) const {
    if (decay == DecayKind::none || decay_lambda == 0.0 || !param_name.ends_with(".w")) return false;
    if (decay_scope.empty()) return true;
    const std::string layer = param_name.substr(0, param_name.size() - 2);
    return std::find(decay_scope.begin(), decay_scope.end(), layer) != decay_scope.end();
  }
};

/// grad + lambda * w (L2) or grad + lambda * sign(w) (L1, sign(0) = 0).
template <typename T>
Tensor<T> apply_weight_decay(const Tensor<T>& grad, const Tensor<T>& w, DecayKind kind, double lambda) {
  if (grad.shape() != w.shape()) throw shape_mismatch("apply_weight_decay", grad.shape(), w.shape());
  if (!(lambda >= 0)) throw std::invalid_argument("apply_weight_decay: lambda must be >= 0");
  if (kind == DecayKind::none || lambda == 0.0) return grad;
  const T lam = static_cast<T>(lambda);
  Tensor<T> out = grad;
  for (std::size_t i = 0; i < w.size(); ++i) {
    out[i] += kind == DecayKind::l2 ? lam * w[i] : lam * detail::sign_of(w[i]);
  }
  return out;
}

/// Penalty whose gradient apply_weight_decay adds: lambda/2 ||w||^2 or lambda ||w||_1.
template <typename T>
double decay_penalty(const Tensor<T>& w, DecayKind kind, double lambda) {
  double acc = 0.0;
  for (T v : w.data()) acc += kind == DecayKind::l2 ? 0.5 * double(v) * double(v) : std::abs(double(v));
  return kind == DecayKind::none ? 0.0 : lambda * acc;
}

template <typename T = float>
struct AdamState {
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update of every tensor named in `grads`.
template <typename T>
void adam_step(AdamState<T>& state, std::map<std::string, Tensor<T>>& params,
               const std::map<std::string, Tensor<T>>& grads, double lr) {
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T step = static_cast<T>(lr * std::sqrt(c2) / c1);
  const T eps_hat = static_cast<T>(state.epsilon * std::sqrt(c2));
  for (const auto& [name, g] : grads) {
    Tensor<T>& w = params.at(name);
    if (w.shape() != g.shape()) throw shape_mismatch("adam_step " + name, w.shape(), g.shape());
    auto [mit, fresh_m] = state.m.try_emplace(name, g.shape());
    auto [vit, fresh_v] = state.v.try_emplace(name, g.shape());
    Tensor<T>& m = mit->second;
    Tensor<T>& v = vit->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      w[i] -= step * m[i] / (std::sqrt(v[i]) + eps_hat);
    }
  }
}

template <typename T>
void sgd_step(std::map<std::string, Tensor<T>>& params, const std::map<std::string, Tensor<T>>& grads, double lr) {
  const T rate = static_cast<T>(lr);
  for (const auto& [name, g] : grads) {
    Tensor<T>& w = params.at(name);
    for (std::size_t i = 0; i < g.size(); ++i) w[i] -= rate * g[i];
  }
}

struct TrainLogEntry {
  std::size_t step = 0;
  /// Mean objective (loss plus decay penalty) over the logging interval.
  double loss = 0.0;
  double clean_acc = 0.0;
  double adv_acc = 0.0;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;
  double final_loss = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, const std::string& what) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Epoch-wise Fisher-Yates batches. A batch that runs past the end of a
/// permutation continues into the next one.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : rng_(seed), order_(n) {
    if (n == 0) throw std::invalid_argument("BatchSampler: empty dataset");
    reshuffle();
  }

  std::array<std::uint64_t, 4> state() const { return rng_.state(); }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(order_.begin(), order_.end());
    pos_ = 0;
  }

  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline double batch_accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i] ? 1 : 0;
  return labels.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Pruning masks for every weight tensor that does not already carry one.
template <typename T>
void attach_prune_masks(ParamSet<T>& params, double fraction) {
  if (fraction <= 0.0) return;
  for (auto& [name, w] : params.tensors) {
    if (!name.ends_with(".w") || params.masks.contains(name)) continue;
    params.masks[name] = prune_mask(w, fraction);
  }
  params.enforce_masks();
}

namespace detail {

/// Replaces the leading share of a batch with adversarial examples and checks
/// that every row stays in the epsilon ball and pixel range.
inline Tensor<float> adversarial_batch(const ModelConfig& cfg, const ParamSet<float>& params,
                                       const Tensor<float>& x, const std::vector<int>& labels,
                                       const AdversaryConfig& adv, const Dataset& data, std::uint64_t seed,
                                       std::size_t step) {
  const std::size_t n = labels.size();
  const auto count = static_cast<std::size_t>(std::ceil(adv.fraction * static_cast<double>(n) - 1e-9));
  const Tensor<float> head = x.rows(0, count);
  const std::vector<int> head_labels(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(count));
  Tensor<float> attacked;
  if (adv.kind == AdversaryKind::fgsm) {
    attacked = fgsm(cfg, params, head, head_labels, adv.epsilon, data.pixel_lo, data.pixel_hi, NormMode::train_frozen);
  } else {
    AttackConfig a;
    a.kind = AttackKind::pgd;
    a.epsilon = adv.epsilon;
    a.step_size = adv.step_size;
    a.iterations = adv.steps;
    a.random_init = adv.random_init;
    a.clip_lo = data.pixel_lo;
    a.clip_hi = data.pixel_hi;
    a.seed = Rng::derived(seed, step).next();
    attacked = pgd(cfg, params, head, head_labels, a, NormMode::train_frozen);
  }
  const float tol = 1e-6F * std::max(1.0F, data.pixel_hi - data.pixel_lo);
  for (std::size_t i = 0; i < attacked.size(); ++i) {
    if (std::abs(attacked[i] - head[i]) > static_cast<float>(adv.epsilon) + tol || attacked[i] < data.pixel_lo ||
        attacked[i] > data.pixel_hi) {
      throw std::logic_error("adversarial batch left the epsilon ball at step " + std::to_string(step));
    }
  }
  Tensor<float> out = x;
  std::copy(attacked.data().begin(), attacked.data().end(), out.raw());
  return out;
}

}  // namespace detail

struct TrainResult {
  ParamSet<float> params;
  TrainLog log;
  /// Batch-order generator state after the last step.
  std::array<std::uint64_t, 4> rng_state{};
};

using ProgressFn = std::function<void(const TrainLogEntry&)>;

/// Minimizes the mean training loss over batches, with the inner adversarial
/// maximization when an adversary is configured.
inline TrainResult train(const ModelConfig& cfg, ParamSet<float> params, const Dataset& data, const TrainConfig& tc,
                         const ProgressFn& progress = {}) {
  cfg.validate();
  tc.validate();
  check_params(cfg, params);
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  TrainResult result;
  attach_prune_masks(params, cfg.quant.prune_fraction);

  BatchSampler sampler(data.size(), Rng::derived(tc.seed, 1).next());
  Rng gradient_rng(Rng::derived(tc.seed, 2).next());
  const std::uint64_t attack_seed = Rng::derived(tc.seed, 3).next();
  AdamState<float> adam;
  adam.beta1 = tc.beta1;
  adam.beta2 = tc.beta2;
  adam.epsilon = tc.adam_epsilon;

  double interval_loss = 0.0;
  std::size_t interval_count = 0;
  for (std::size_t step = 0; step < tc.total_steps; ++step) {
    const auto index = sampler.next(tc.batch_size);
    const Tensor<float> clean = data.batch(index);
    const std::vector<int> labels = data.batch_labels(index);
    const bool log_now = (step + 1) % tc.log_interval == 0 || step + 1 == tc.total_steps;

    Tensor<float> x = clean;
    if (tc.adversary.kind != AdversaryKind::none) {
      x = detail::adversarial_batch(cfg, params, clean, labels, tc.adversary, data, attack_seed, step);
    }

    Graph<float> g;
    ForwardOptions opts;
    opts.norm = NormMode::train;
    opts.trainable = true;
    opts.gradient_rng = cfg.quant.quantizes_gradients() ? &gradient_rng : nullptr;
    const Var<float> logits = forward(cfg, params, g, g.constant(x), opts);
    const Var<float> loss = mean_loss(cfg, logits, labels);
    const float loss_value = loss.value().item();
    if (!std::isfinite(loss_value)) {
      throw TrainingDiverged(step, "training diverged: loss is not finite at step " + std::to_string(step));
    }
    double objective = loss_value;
    auto grads = g.backward(loss);
    for (auto& [name, grad] : grads) {
      if (tc.decays(name)) {
        const Tensor<float>& w = params.tensors.at(name);
        objective += decay_penalty(w, tc.decay, tc.decay_lambda);
        grad = apply_weight_decay(grad, w, tc.decay, tc.decay_lambda);
      }
      if (auto m = params.masks.find(name); m != params.masks.end()) grad = apply_mask(grad, m->second);
    }
    if (tc.optimizer == OptimizerKind::adam) {
      adam_step(adam, params.tensors, grads, tc.learning_rate);
    } else {
      sgd_step(params.tensors, grads, tc.learning_rate);
    }
    params.enforce_masks();

    interval_loss += objective;
    ++interval_count;
    result.log.final_loss = objective;
    if (log_now) {
      TrainLogEntry e;
      e.step = step + 1;
      e.loss = interval_loss / static_cast<double>(interval_count);
      const auto adv_pred = predicted_classes(cfg, logits.value());
      e.adv_acc = batch_accuracy(adv_pred, labels);
      e.clean_acc = tc.adversary.kind == AdversaryKind::none
                        ? e.adv_acc
                        : batch_accuracy(predicted_classes(cfg, predict_logits(cfg, params, clean)), labels);
      result.log.entries.push_back(e);
      if (progress) progress(e);
      interval_loss = 0.0;
      interval_count = 0;
    }
  }
  result.params = std::move(params);
  result.rng_state = sampler.state();
  return result;
}

}  // namespace robustbench
