#pragma once

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "robustbench/attacks.hpp"
#include "robustbench/datasets.hpp"
#include "robustbench/models.hpp"
#include "robustbench/quantization.hpp"
#include "robustbench/training.hpp"

namespace robustbench {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ConfigKey {
  std::string_view name;
  std::string_view default_value;
  std::string_view help;
};

// clang-format off
inline constexpr ConfigKey kConfigKeys[] = {
    {"run.seed", "0", "master seed"},
    {"run.name", "run", "model name used in reports"},
    {"data.dataset", "mnist37", "mnist37 | mnist | spheres | cifar10"},
    {"data.dir", "", "dataset directory (falls back to ROBUSTBENCH_DATA)"},
    {"data.train_limit", "0", "keep the first N training examples (0 = all)"},
    {"data.test_limit", "0", "keep the first N test examples (0 = all)"},
    {"spheres.dim", "2", "spheres dimension"},
    {"spheres.inner_radius", "1.0", "inner sphere radius"},
    {"spheres.outer_radius", "1.3", "outer sphere radius"},
    {"spheres.samples_per_class", "5000", "points per class before quadrant removal"},
    {"spheres.removed_quadrants", "+-,-+", "sign patterns dropped from training"},
    {"spheres.test_seed_offset", "1", "test split uses seed + offset"},
    {"model.kind", "logistic_regression", "logistic_regression | spheres_mlp | vanilla_cnn"},
    {"model.filters", "64", "CNN base filter count"},
    {"model.hidden_width", "1000", "MLP hidden width"},
    {"model.quantized_layers", "", "comma list of quantized layers (empty = default)"},
    {"model.standardize_input", "false", "per-image standardization before the first layer"},
    {"model.init", "random", "random | expert | zero"},
    {"model.init_stddev", "0", "weight init stddev (0 = He)"},
    {"quant.weight_bits", "32", "weight bits"},
    {"quant.activation_bits", "32", "activation bits"},
    {"quant.gradient_bits", "32", "gradient bits"},
    {"quant.prune_fraction", "0", "fraction of smallest weights pruned at train start"},
    {"train.optimizer", "adam", "adam | sgd"},
    {"train.learning_rate", "0.001", "learning rate"},
    {"train.beta1", "0.9", "Adam beta1"},
    {"train.beta2", "0.999", "Adam beta2"},
    {"train.adam_epsilon", "1e-08", "Adam epsilon"},
    {"train.batch_size", "128", "batch size"},
    {"train.steps", "1000", "optimizer steps"},
    {"train.decay", "none", "none | l1 | l2"},
    {"train.decay_lambda", "0", "decay constant"},
    {"train.decay_scope", "", "comma list of decayed layers (empty = all)"},
    {"train.adversary", "none", "none | fgsm | pgd"},
    {"train.adversary_epsilon", "0.1", "adversary L-inf radius"},
    {"train.adversary_steps", "40", "PGD steps"},
    {"train.adversary_step_size", "0.01", "PGD step size"},
    {"train.adversary_random_init", "true", "PGD random start"},
    {"train.adversary_fraction", "1", "share of each batch made adversarial"},
    {"train.log_interval", "100", "steps per log row"},
    {"attack.kind", "fgsm", "fgsm | pgd"},
    {"attack.epsilons", "0,0.1", "comma list of epsilons for the robustness curve"},
    {"attack.step_size", "0.01", "PGD / ascent step size"},
    {"attack.iterations", "40", "PGD iterations"},
    {"attack.random_init", "true", "PGD random start"},
    {"attack.seed_offset", "7", "attack seed = run.seed + offset"},
    {"sweep.offsets", "", "comma list of offsets (empty = 0,0.05,...,1 of the pixel span)"},
    {"generate.steps", "100", "ascent steps"},
    {"generate.step_size", "0.01", "ascent step size"},
    {"generate.noise_sigma", "0.1", "start noise stddev"},
    {"generate.targets", "", "comma list of target classes (empty = all)"},
    {"boundary.resolution", "200", "grid resolution per axis"},
    {"boundary.bbox", "-2,2,-2,2", "x0_lo,x0_hi,x1_lo,x1_hi"},
    {"boundary.angles_per_quadrant", "48", "rays per quadrant"},
    {"boundary.r_lo", "0.5", "bisection lower radius"},
    {"boundary.r_hi", "2.0", "bisection upper radius"},
};
// clang-format on

inline bool is_config_key(std::string_view key) {
  return std::any_of(std::begin(kConfigKeys), std::end(kConfigKeys), [&](const ConfigKey& k) { return k.name == key; });
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

/// Resolved key=value configuration. Every known key is always present.
class Config {
 public:
  Config() {
    for (const auto& k : kConfigKeys) values_[std::string(k.name)] = std::string(k.default_value);
  }

  static Config from_map(const std::map<std::string, std::string>& entries) {
    Config c;
    for (const auto& [k, v] : entries) c.set(k, v);
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    if (!is_config_key(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  /// Applies `key = value` lines and returns the keys they set. '#' starts a
  /// comment.
  std::set<std::string> merge_text(std::string_view text, const std::string& source = "config") {
    std::set<std::string> keys;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = detail::trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
      }
      const std::string key = detail::trim(std::string_view(t).substr(0, eq));
      if (!is_config_key(key)) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
      }
      values_[key] = detail::trim(std::string_view(t).substr(eq + 1));
      keys.insert(key);
    }
    return keys;
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const { return parse_real(key, str(key)); }

  long long integer(const std::string& key) const {
    const std::string& s = str(key);
    long long v = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError(key + ": expected an integer, got '" + s + "'");
    return v;
  }

  std::size_t count(const std::string& key) const {
    const long long v = integer(key);
    if (v < 0) throw ConfigError(key + ": must be >= 0");
    return static_cast<std::size_t>(v);
  }

  std::uint64_t u64(const std::string& key) const {
    const std::string& s = str(key);
    std::uint64_t v = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError(key + ": expected an unsigned integer, got '" + s + "'");
    return v;
  }

  bool boolean(const std::string& key) const {
    const std::string& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key + ": expected true/false, got '" + s + "'");
  }

  std::vector<std::string> list(const std::string& key) const { return detail::split(str(key), ','); }

  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : list(key)) out.push_back(parse_real(key, s));
    return out;
  }

  std::vector<int> ints(const std::string& key) const {
    std::vector<int> out;
    for (const auto& s : list(key)) {
      int v = 0;
      const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError(key + ": bad integer '" + s + "'");
      out.push_back(v);
    }
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Canonical text form: one sorted `key=value` line per key.
  std::string text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  bool operator==(const Config&) const = default;

 private:
  static double parse_real(const std::string& key, const std::string& s) {
    double v = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size() || s.empty()) {
      throw ConfigError(key + ": expected a number, got '" + s + "'");
    }
    return v;
  }

  std::map<std::string, std::string> values_;
};

inline std::set<Quadrant> parse_quadrants(const std::vector<std::string>& items) {
  std::set<Quadrant> out;
  for (const auto& q : items) {
    if (q.size() != 2 || (q[0] != '+' && q[0] != '-') || (q[1] != '+' && q[1] != '-')) {
      throw ConfigError("spheres.removed_quadrants: expected patterns like '+-', got '" + q + "'");
    }
    out.insert({q[0] == '+' ? 1 : -1, q[1] == '+' ? 1 : -1});
  }
  return out;
}

inline SpheresConfig spheres_config(const Config& c) {
  SpheresConfig s;
  s.dim = c.count("spheres.dim");
  s.inner_radius = c.real("spheres.inner_radius");
  s.outer_radius = c.real("spheres.outer_radius");
  s.samples_per_class = c.count("spheres.samples_per_class");
  s.removed_quadrants = parse_quadrants(c.list("spheres.removed_quadrants"));
  s.seed = c.u64("run.seed");
  s.validate();
  return s;
}

inline QuantSpec quant_spec(const Config& c) {
  QuantSpec q;
  q.weight_bits = static_cast<int>(c.integer("quant.weight_bits"));
  q.activation_bits = static_cast<int>(c.integer("quant.activation_bits"));
  q.gradient_bits = static_cast<int>(c.integer("quant.gradient_bits"));
  q.prune_fraction = c.real("quant.prune_fraction");
  q.validate();
  return q;
}

/// Model description for a dataset with the given example shape and class count.
inline ModelConfig model_config(const Config& c, const Shape& input_shape, int class_count) {
  ModelConfig m;
  m.kind = parse_model_kind(c.str("model.kind"));
  m.input_shape = input_shape;
  m.class_count = m.kind == ModelKind::logistic_regression ? 2 : class_count;
  m.filters = c.count("model.filters");
  m.hidden_width = c.count("model.hidden_width");
  m.quantized_layers = c.list("model.quantized_layers");
  m.standardize_input = c.boolean("model.standardize_input");
  m.quant = quant_spec(c);
  m.validate();
  return m;
}

inline TrainConfig train_config(const Config& c) {
  TrainConfig t;
  t.optimizer = parse_optimizer(c.str("train.optimizer"));
  t.learning_rate = c.real("train.learning_rate");
  t.beta1 = c.real("train.beta1");
  t.beta2 = c.real("train.beta2");
  t.adam_epsilon = c.real("train.adam_epsilon");
  t.batch_size = c.count("train.batch_size");
  t.total_steps = c.count("train.steps");
  t.decay = parse_decay(c.str("train.decay"));
  t.decay_lambda = c.real("train.decay_lambda");
  t.decay_scope = c.list("train.decay_scope");
  t.adversary.kind = parse_adversary(c.str("train.adversary"));
  t.adversary.epsilon = c.real("train.adversary_epsilon");
  t.adversary.steps = static_cast<int>(c.integer("train.adversary_steps"));
  t.adversary.step_size = c.real("train.adversary_step_size");
  t.adversary.random_init = c.boolean("train.adversary_random_init");
  t.adversary.fraction = c.real("train.adversary_fraction");
  t.log_interval = c.count("train.log_interval");
  t.seed = c.u64("run.seed");
  t.validate();
  return t;
}

inline AttackConfig attack_config(const Config& c, double clip_lo, double clip_hi) {
  AttackConfig a;
  a.kind = parse_attack_kind(c.str("attack.kind"));
  if (a.kind != AttackKind::fgsm && a.kind != AttackKind::pgd) {
    throw ConfigError("attack.kind: robustness curves support fgsm and pgd");
  }
  a.step_size = c.real("attack.step_size");
  a.iterations = static_cast<int>(c.integer("attack.iterations"));
  a.random_init = c.boolean("attack.random_init");
  a.clip_lo = clip_lo;
  a.clip_hi = clip_hi;
  a.seed = c.u64("run.seed") + c.u64("attack.seed_offset");
  return a;
}

inline AttackConfig generate_config(const Config& c, double clip_lo, double clip_hi) {
  AttackConfig a;
  a.kind = AttackKind::nonexample_ascent;
  a.iterations = static_cast<int>(c.integer("generate.steps"));
  a.step_size = c.real("generate.step_size");
  a.noise_sigma = c.real("generate.noise_sigma");
  a.clip_lo = clip_lo;
  a.clip_hi = clip_hi;
  a.seed = c.u64("run.seed") + c.u64("attack.seed_offset");
  a.validate();
  return a;
}

/// Keys that describe the trained model and its data; a checkpoint stores
/// exactly these. Initialization keys only matter before training.
inline bool is_model_key(const std::string& key) {
  if (key == "model.init" || key == "model.init_stddev") return false;
  return key.starts_with("model.") || key.starts_with("quant.") || key.starts_with("spheres.") ||
         key == "data.dataset";
}

}  // namespace robustbench
