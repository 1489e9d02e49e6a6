#pragma once

#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>

#include "robustbench/checkpoint.hpp"
#include "robustbench/config.hpp"
#include "robustbench/datasets.hpp"
#include "robustbench/models.hpp"

namespace robustbench {

/// Thrown when a checkpoint does not fit the requested architecture.
class ArchitectureMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// data.dir, else ROBUSTBENCH_DATA, else empty.
inline std::filesystem::path resolve_data_dir(const Config& c) {
  if (!c.str("data.dir").empty()) return c.str("data.dir");
  if (const char* env = std::getenv("ROBUSTBENCH_DATA"); env != nullptr) return env;
  return {};
}

namespace detail {

inline std::filesystem::path require_data_dir(const Config& c) {
  const auto dir = resolve_data_dir(c);
  if (dir.empty()) {
    throw DataError(DataError::Kind::missing_file, "no dataset directory: set data.dir, --data-dir or ROBUSTBENCH_DATA");
  }
  return dir;
}

inline Dataset load_cifar10(const std::filesystem::path& dir, bool training_split) {
  std::filesystem::path base = dir;
  if (!std::filesystem::exists(base / "test_batch.bin") && std::filesystem::exists(base / "cifar-10-batches-bin")) {
    base /= "cifar-10-batches-bin";
  }
  if (!training_split) return load_cifar10_binary(base / "test_batch.bin");
  Dataset all;
  std::vector<float> pixels;
  for (int b = 1; b <= 5; ++b) {
    Dataset part = load_cifar10_binary(base / ("data_batch_" + std::to_string(b) + ".bin"));
    pixels.insert(pixels.end(), part.images.data().begin(), part.images.data().end());
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
    all.pixel_lo = part.pixel_lo;
    all.pixel_hi = part.pixel_hi;
    all.class_count = part.class_count;
  }
  all.images = Tensor<float>(Shape{all.labels.size(), 32, 32, 3}, std::move(pixels));
  return all;
}

}  // namespace detail

/// The training or test split named by data.dataset, truncated by the
/// data.*_limit keys.
inline Dataset load_split(const Config& c, bool training_split) {
  const std::string& name = c.str("data.dataset");
  Dataset d;
  if (name == "spheres") {
    SpheresConfig sc = spheres_config(c);
    if (!training_split) sc.seed += c.u64("spheres.test_seed_offset");
    d = spheres_generate(sc, training_split);
  } else if (name == "mnist" || name == "mnist37") {
    d = load_mnist(detail::require_data_dir(c), training_split);
    if (name == "mnist37") d = filter_three_seven(d);
  } else if (name == "cifar10") {
    d = detail::load_cifar10(detail::require_data_dir(c), training_split);
  } else {
    throw ConfigError("data.dataset: unknown dataset '" + name + "'");
  }
  const std::size_t limit = c.count(training_split ? "data.train_limit" : "data.test_limit");
  if (limit > 0 && limit < d.size()) d = d.head(limit);
  if (d.empty()) throw DataError(DataError::Kind::empty, "dataset '" + name + "' is empty");
  return d;
}

inline ModelConfig model_config_for(const Config& c, const Dataset& d) {
  return model_config(c, d.example_shape(), d.class_count);
}

/// Starting parameters per model.init: random (He or init_stddev), expert
/// (mean three minus mean seven) or zero.
inline ParamSet<float> initial_params(const Config& c, const ModelConfig& model, const Dataset& train_split) {
  const std::string& init = c.str("model.init");
  if (init == "expert") {
    if (model.kind != ModelKind::logistic_regression || c.str("data.dataset") != "mnist37") {
      throw ConfigError("model.init=expert needs logistic_regression on mnist37");
    }
    return expert_init(train_split);
  }
  Rng rng = Rng::derived(c.u64("run.seed"), 0);
  ParamSet<float> p = init_params<float>(model, rng, c.real("model.init_stddev"));
  if (init == "zero") {
    for (auto& [name, t] : p.tensors) {
      if (!name.ends_with(".bn.gamma")) t = Tensor<float>(t.shape());
    }
  } else if (init != "random") {
    throw ConfigError("model.init: expected random, expert or zero, got '" + init + "'");
  }
  return p;
}

/// The model-defining subset of a configuration plus run.name, as stored in
/// checkpoints.
inline std::string model_text(const Config& c) {
  std::string out;
  for (const auto& [k, v] : c.values()) {
    if (is_model_key(k) || k == "run.name") out += k + "=" + v + "\n";
  }
  return out;
}

/// Overlays the checkpoint's architecture keys onto `c`. Keys the caller set
/// explicitly (`explicit_keys`) must agree with the checkpoint.
inline void adopt_checkpoint_config(Config& c, const Checkpoint& ck, const std::set<std::string>& explicit_keys) {
  Config stored;
  stored.merge_text(ck.config_text, "checkpoint");
  for (const auto& [k, v] : stored.values()) {
    if (k == "run.name" && !explicit_keys.contains(k)) c.set(k, v);
    if (!is_model_key(k)) continue;
    if (explicit_keys.contains(k) && c.str(k) != v) {
      throw ArchitectureMismatch("checkpoint has " + k + "=" + v + " but the run asks for " + k + "=" + c.str(k));
    }
    c.set(k, v);
  }
}

inline void check_checkpoint_params(const ModelConfig& model, const ParamSet<float>& params) {
  try {
    check_params(model, params);
  } catch (const std::exception& e) {
    throw ArchitectureMismatch(std::string("checkpoint does not match the model: ") + e.what());
  }
}

}  // namespace robustbench
