#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "robustbench/autodiff.hpp"
#include "robustbench/datasets.hpp"
#include "robustbench/quantization.hpp"
#include "robustbench/random.hpp"
#include "robustbench/tensor.hpp"

namespace robustbench {

using ad::BatchNormStats;
using ad::NormMode;

enum class ModelKind { logistic_regression, spheres_mlp, vanilla_cnn };

inline std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::logistic_regression: return "logistic_regression";
    case ModelKind::spheres_mlp: return "spheres_mlp";
    case ModelKind::vanilla_cnn: return "vanilla_cnn";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "logistic_regression") return ModelKind::logistic_regression;
  if (s == "spheres_mlp") return ModelKind::spheres_mlp;
  if (s == "vanilla_cnn") return ModelKind::vanilla_cnn;
  throw std::invalid_argument("unknown model kind '" + s + "'");
}

/// Architecture descriptor.
///
/// logistic_regression: one linear unit on the flattened input.
/// spheres_mlp: fc1 -> fc2 -> out, two hidden layers of `hidden_width`.
/// vanilla_cnn: conv1 8x8/2 SAME (n_f), conv2 6x6/1 VALID (2 n_f),
///              conv3 5x5/1 VALID (2 n_f), flatten, linear readout.
///
/// A quantized layer gets quantized weights, a gradient quantizer on its
/// pre-activation output, batch norm (hidden layers only) and quantized
/// activations in place of ReLU.
struct ModelConfig {
  ModelKind kind = ModelKind::logistic_regression;
  Shape input_shape{28, 28, 1};
  int class_count = 2;
  std::size_t filters = 64;
  std::size_t hidden_width = 1000;
  QuantSpec quant;
  /// Layers that carry quantization; empty selects the per-kind default.
  std::vector<std::string> quantized_layers;
  bool standardize_input = false;

  std::size_t output_width() const {
    return kind == ModelKind::logistic_regression ? 1 : static_cast<std::size_t>(class_count);
  }

  std::vector<std::string> layer_names() const {
    switch (kind) {
      case ModelKind::logistic_regression: return {"linear"};
      case ModelKind::spheres_mlp: return {"fc1", "fc2", "out"};
      case ModelKind::vanilla_cnn: return {"conv1", "conv2", "conv3", "out"};
    }
    return {};
  }

  std::vector<std::string> default_quantized_layers() const {
    switch (kind) {
      case ModelKind::logistic_regression: return {"linear"};
      case ModelKind::spheres_mlp: return {"fc2"};
      case ModelKind::vanilla_cnn: return {"conv2", "conv3"};
    }
    return {};
  }

  bool is_quantized(const std::string& layer) const {
    if (!quant.any()) return false;
    const auto& layers = quantized_layers.empty() ? default_quantized_layers() : quantized_layers;
    return std::find(layers.begin(), layers.end(), layer) != layers.end();
  }

  void validate() const {
    quant.validate();
    const auto names = layer_names();
    for (const auto& l : quantized_layers) {
      if (std::find(names.begin(), names.end(), l) == names.end()) {
        throw std::invalid_argument("quantized layer '" + l + "' does not exist in " + to_string(kind));
      }
    }
    if (kind == ModelKind::logistic_regression && class_count != 2) {
      throw std::invalid_argument("logistic_regression needs class_count == 2");
    }
    if (kind == ModelKind::vanilla_cnn && input_shape.size() != 3) {
      throw std::invalid_argument("vanilla_cnn needs an H x W x C input shape");
    }
    if (class_count < 2) throw std::invalid_argument("class_count must be >= 2");
  }
};

/// Spatial extents after each vanilla_cnn conv layer.
struct CnnGeometry {
  std::size_t conv1_h, conv1_w, conv2_h, conv2_w, conv3_h, conv3_w;
};

inline CnnGeometry cnn_geometry(const ModelConfig& cfg) {
  const std::size_t h = cfg.input_shape.at(0), w = cfg.input_shape.at(1);
  CnnGeometry g{};
  g.conv1_h = detail::same_output(h, 2);
  g.conv1_w = detail::same_output(w, 2);
  if (g.conv1_h < 10 || g.conv1_w < 10) throw std::invalid_argument("vanilla_cnn: input too small");
  g.conv2_h = g.conv1_h - 6 + 1;
  g.conv2_w = g.conv1_w - 6 + 1;
  g.conv3_h = g.conv2_h - 5 + 1;
  g.conv3_w = g.conv2_w - 5 + 1;
  return g;
}

/// Named trainable tensors plus pruning masks and batch-norm running stats.
template <typename T = float>
struct ParamSet {
  std::map<std::string, Tensor<T>> tensors;
  std::map<std::string, Tensor<T>> masks;
  std::map<std::string, Tensor<T>> buffers;

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("parameter '" + name + "' not found");
    return it->second;
  }

  bool operator==(const ParamSet&) const = default;

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [k, v] : tensors) out.tensors[k] = v.template cast<U>();
    for (const auto& [k, v] : masks) out.masks[k] = v.template cast<U>();
    for (const auto& [k, v] : buffers) out.buffers[k] = v.template cast<U>();
    return out;
  }

  /// Re-zero every masked position.
  void enforce_masks() {
    for (const auto& [name, mask] : masks) tensors.at(name) = apply_mask(tensors.at(name), mask);
  }
};

/// Expected parameter shapes for a configuration.
inline std::map<std::string, Shape> parameter_shapes(const ModelConfig& cfg) {
  std::map<std::string, Shape> shapes;
  const std::size_t in = shape_size(cfg.input_shape);
  auto add_bn = [&](const std::string& layer, std::size_t width) {
    if (cfg.is_quantized(layer)) {
      shapes[layer + ".bn.gamma"] = {width};
      shapes[layer + ".bn.beta"] = {width};
    }
  };
  switch (cfg.kind) {
    case ModelKind::logistic_regression:
      shapes["linear.w"] = {in, 1};
      shapes["linear.b"] = {1};
      break;
    case ModelKind::spheres_mlp: {
      const std::size_t h = cfg.hidden_width;
      shapes["fc1.w"] = {in, h};
      shapes["fc1.b"] = {h};
      shapes["fc2.w"] = {h, h};
      shapes["fc2.b"] = {h};
      shapes["out.w"] = {h, 2};
      shapes["out.b"] = {2};
      add_bn("fc1", h);
      add_bn("fc2", h);
      break;
    }
    case ModelKind::vanilla_cnn: {
      const std::size_t c = cfg.input_shape.at(2), f = cfg.filters;
      const CnnGeometry g = cnn_geometry(cfg);
      shapes["conv1.w"] = {8, 8, c, f};
      shapes["conv1.b"] = {f};
      shapes["conv2.w"] = {6, 6, f, 2 * f};
      shapes["conv2.b"] = {2 * f};
      shapes["conv3.w"] = {5, 5, 2 * f, 2 * f};
      shapes["conv3.b"] = {2 * f};
      shapes["out.w"] = {g.conv3_h * g.conv3_w * 2 * f, static_cast<std::size_t>(cfg.class_count)};
      shapes["out.b"] = {static_cast<std::size_t>(cfg.class_count)};
      add_bn("conv1", f);
      add_bn("conv2", 2 * f);
      add_bn("conv3", 2 * f);
      break;
    }
  }
  return shapes;
}

/// Throws if `params` does not carry exactly the tensors `cfg` needs.
template <typename T>
void check_params(const ModelConfig& cfg, const ParamSet<T>& params) {
  const auto shapes = parameter_shapes(cfg);
  for (const auto& [name, shape] : shapes) {
    auto it = params.tensors.find(name);
    if (it == params.tensors.end()) throw std::invalid_argument("missing parameter '" + name + "'");
    if (it->second.shape() != shape) throw shape_mismatch("parameter " + name, shape, it->second.shape());
  }
  if (params.tensors.size() != shapes.size()) throw std::invalid_argument("parameter set has extra tensors");
  for (const auto& [name, mask] : params.masks) {
    if (!params.tensors.contains(name) || params.tensors.at(name).shape() != mask.shape()) {
      throw std::invalid_argument("mask '" + name + "' does not match a parameter");
    }
    for (T v : mask.data()) {
      if (v != T{0} && v != T{1}) throw std::invalid_argument("mask '" + name + "' is not {0,1}-valued");
    }
  }
}

/// Fresh parameters: weights from a truncated normal with stddev
/// sqrt(2 / fan_in) (or `stddev` when positive), biases zero, batch-norm
/// gamma one and beta zero.
template <typename T = float>
ParamSet<T> init_params(const ModelConfig& cfg, Rng& rng, double stddev = 0.0) {
  cfg.validate();
  ParamSet<T> p;
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    Tensor<T> t(shape);
    if (name.ends_with(".w")) {
      const std::size_t fan_in = t.size() / shape.back();
      const double sd = stddev > 0 ? stddev : std::sqrt(2.0 / static_cast<double>(fan_in));
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.truncated_normal(sd));
    } else if (name.ends_with(".gamma")) {
      t = Tensor<T>(shape, T{1});
    }
    if (name.ends_with(".gamma")) {
      const std::string layer = name.substr(0, name.size() - std::string(".gamma").size());
      p.buffers[layer + ".mean"] = Tensor<T>(shape);
      p.buffers[layer + ".var"] = Tensor<T>(shape, T{1});
    }
    p.tensors[name] = std::move(t);
  }
  return p;
}

/// Logistic regression initialized with the mean three minus the mean seven
/// (labels 1 and 0 of a three-vs-seven dataset); bias zero.
inline ParamSet<float> expert_init(const Dataset& three_seven) {
  const Tensor<float> three = average_class_image(three_seven, kThreeLabel);
  const Tensor<float> seven = average_class_image(three_seven, kSevenLabel);
  Tensor<float> w(Shape{three.size(), 1});
  for (std::size_t i = 0; i < three.size(); ++i) w[i] = three[i] - seven[i];
  ParamSet<float> p;
  p.tensors["linear.w"] = std::move(w);
  p.tensors["linear.b"] = Tensor<float>(Shape{1});
  return p;
}

inline ModelConfig logistic_config(const Shape& input_shape, QuantSpec quant = {}) {
  ModelConfig cfg;
  cfg.kind = ModelKind::logistic_regression;
  cfg.input_shape = input_shape;
  cfg.class_count = 2;
  cfg.quant = quant;
  return cfg;
}

struct ForwardOptions {
  NormMode norm = NormMode::eval;
  /// Register parameters as trainable graph leaves (gradients wanted).
  bool trainable = false;
  /// Source for stochastic gradient quantization; null disables it.
  Rng* gradient_rng = nullptr;
};

namespace detail {

template <typename T>
class ForwardBuilder {
 public:
  ForwardBuilder(const ModelConfig& cfg, ParamSet<T>& params, Graph<T>& graph, const ForwardOptions& opts)
      : cfg_(cfg), params_(params), graph_(graph), opts_(opts) {}

  Var<T> param(const std::string& name) {
    const Tensor<T>& t = params_.at(name);
    return opts_.trainable ? graph_.parameter(name, t, true) : graph_.constant(t);
  }

  Var<T> weights(const std::string& layer) {
    Var<T> w = param(layer + ".w");
    if (cfg_.is_quantized(layer)) w = ad::quantize_weights(w, cfg_.quant.weight_bits);
    return w;
  }

  /// Bias, gradient quantizer, batch norm and nonlinearity for a hidden layer.
  Var<T> hidden_tail(const std::string& layer, Var<T> pre) {
    pre = ad::add(pre, param(layer + ".b"));
    if (!cfg_.is_quantized(layer)) return ad::relu(pre);
    pre = ad::quantize_gradients(pre, cfg_.quant.gradient_bits, opts_.gradient_rng);
    BatchNormStats<T> stats;
    stats.mean = &params_.buffers.at(layer + ".bn.mean");
    stats.var = &params_.buffers.at(layer + ".bn.var");
    pre = ad::batch_norm(pre, param(layer + ".bn.gamma"), param(layer + ".bn.beta"), stats, opts_.norm);
    if (cfg_.quant.quantizes_activations()) return ad::quantize_activations(pre, cfg_.quant.activation_bits);
    return ad::relu(pre);
  }

  Var<T> readout(const std::string& layer, Var<T> h) {
    Var<T> out = ad::add(ad::matmul(h, weights(layer)), param(layer + ".b"));
    if (cfg_.is_quantized(layer)) out = ad::quantize_gradients(out, cfg_.quant.gradient_bits, opts_.gradient_rng);
    return out;
  }

  Var<T> run(Var<T> x) {
    const std::size_t n = x.shape().at(0);
    const std::size_t in = shape_size(cfg_.input_shape);
    if (x.value().size() != n * in) {
      Shape want{n};
      want.insert(want.end(), cfg_.input_shape.begin(), cfg_.input_shape.end());
      throw shape_mismatch("forward(" + to_string(cfg_.kind) + ")", want, x.shape());
    }
    if (cfg_.standardize_input) x = ad::standardize_per_example(x);
    switch (cfg_.kind) {
      case ModelKind::logistic_regression:
        return readout("linear", ad::reshape(x, Shape{n, in}));
      case ModelKind::spheres_mlp: {
        Var<T> h = ad::reshape(x, Shape{n, in});
        h = hidden_tail("fc1", ad::matmul(h, weights("fc1")));
        h = hidden_tail("fc2", ad::matmul(h, weights("fc2")));
        return readout("out", h);
      }
      case ModelKind::vanilla_cnn: {
        Shape nhwc{n};
        nhwc.insert(nhwc.end(), cfg_.input_shape.begin(), cfg_.input_shape.end());
        Var<T> h = ad::reshape(x, nhwc);
        h = hidden_tail("conv1", ad::conv2d(h, weights("conv1"), 2, Padding::same));
        h = hidden_tail("conv2", ad::conv2d(h, weights("conv2"), 1, Padding::valid));
        h = hidden_tail("conv3", ad::conv2d(h, weights("conv3"), 1, Padding::valid));
        const std::size_t flat = h.value().size() / n;
        return readout("out", ad::reshape(h, Shape{n, flat}));
      }
    }
    throw std::logic_error("unreachable");
  }

 private:
  const ModelConfig& cfg_;
  ParamSet<T>& params_;
  Graph<T>& graph_;
  const ForwardOptions& opts_;
};

}  // namespace detail

/// Records the model on `graph` and returns the logits: [N,1] for logistic
/// regression, [N,class_count] otherwise. Batch-norm running statistics in
/// `params` are updated only with NormMode::train.
template <typename T>
Var<T> forward(const ModelConfig& cfg, ParamSet<T>& params, Graph<T>& graph, const Var<T>& x,
               const ForwardOptions& opts = {}) {
  return detail::ForwardBuilder<T>(cfg, params, graph, opts).run(x);
}

/// Eval-mode logits for a batch, evaluated in chunks.
template <typename T>
Tensor<T> predict_logits(const ModelConfig& cfg, const ParamSet<T>& params, const Tensor<T>& batch,
                         std::size_t chunk = 256) {
  ParamSet<T>& p = const_cast<ParamSet<T>&>(params);  // eval mode never writes
  const std::size_t n = batch.dim(0);
  const std::size_t width = cfg.output_width();
  Tensor<T> out(Shape{n, width});
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t end = std::min(n, begin + chunk);
    Graph<T> g;
    const Var<T> logits = forward(cfg, p, g, g.constant(batch.rows(begin, end)));
    std::copy(logits.value().data().begin(), logits.value().data().end(), out.raw() + begin * width);
  }
  return out;
}

/// Class probabilities [N, classes] from logits. The single logistic logit
/// becomes (1 - sigmoid(z), sigmoid(z)).
template <typename T>
Tensor<T> class_probabilities(const ModelConfig& cfg, const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0);
  if (cfg.kind == ModelKind::logistic_regression) {
    Tensor<T> p(Shape{n, 2});
    for (std::size_t i = 0; i < n; ++i) {
      const T s = ad::sigmoid_value(logits[i]);
      p[2 * i] = T{1} - s;
      p[2 * i + 1] = s;
    }
    return p;
  }
  Graph<T> g;
  return ad::softmax(g.constant(logits)).value();
}

/// Arg-max class per row; the logistic model predicts 1 iff its logit > 0.
template <typename T>
std::vector<int> predicted_classes(const ModelConfig& cfg, const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0);
  std::vector<int> out(n);
  if (cfg.kind == ModelKind::logistic_regression) {
    for (std::size_t i = 0; i < n; ++i) out[i] = logits[i] > T{0} ? 1 : 0;
    return out;
  }
  const std::size_t c = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.raw() + i * c;
    out[i] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

/// Per-example training loss J: sigmoid cross entropy for the logistic model,
/// softmax cross entropy otherwise. Shape [N].
template <typename T>
Var<T> per_example_loss(const ModelConfig& cfg, const Var<T>& logits, const std::vector<int>& labels) {
  if (cfg.kind == ModelKind::logistic_regression) {
    Tensor<T> targets(Shape{labels.size(), 1});
    for (std::size_t i = 0; i < labels.size(); ++i) targets[i] = static_cast<T>(labels[i]);
    return ad::reshape(ad::sigmoid_cross_entropy(logits, targets), Shape{labels.size()});
  }
  return ad::softmax_cross_entropy(logits, labels);
}

template <typename T>
Var<T> mean_loss(const ModelConfig& cfg, const Var<T>& logits, const std::vector<int>& labels) {
  return ad::reduce_mean(per_example_loss(cfg, logits, labels));
}

struct KernelSparsity {
  std::string layer;
  double dead_fraction = 0.0;
  /// Max |element| of every surviving kernel, sorted descending.
  std::vector<double> survivor_max;
};

/// A conv kernel (one output channel of an HWIO tensor) is dead when all of
/// its elements are below `tau` in magnitude.
template <typename T>
std::vector<KernelSparsity> kernel_sparsity_report(const ParamSet<T>& params, double tau = 1e-2) {
  std::vector<KernelSparsity> report;
  for (const auto& [name, w] : params.tensors) {
    if (w.rank() != 4 || !name.ends_with(".w")) continue;
    const std::size_t out = w.shape().back();
    std::vector<double> kernel_max(out, 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      kernel_max[i % out] = std::max(kernel_max[i % out], static_cast<double>(std::abs(w[i])));
    }
    KernelSparsity k;
    k.layer = name.substr(0, name.size() - 2);
    std::size_t dead = 0;
    for (double m : kernel_max) {
      if (m < tau) {
        ++dead;
      } else {
        k.survivor_max.push_back(m);
      }
    }
    std::sort(k.survivor_max.begin(), k.survivor_max.end(), std::greater<>());
    k.dead_fraction = static_cast<double>(dead) / static_cast<double>(out);
    report.push_back(std::move(k));
  }
  return report;
}

}  // namespace robustbench
