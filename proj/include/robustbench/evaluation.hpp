#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "robustbench/attacks.hpp"
#include "robustbench/datasets.hpp"
#include "robustbench/io.hpp"
#include "robustbench/models.hpp"
#include "robustbench/tensor.hpp"

namespace robustbench {

/// Fraction of examples whose predicted class equals the label.
template <typename T>
double accuracy_on(const ModelConfig& cfg, const ParamSet<T>& params, const Tensor<T>& images,
                   const std::vector<int>& labels) {
  if (labels.empty()) throw std::invalid_argument("accuracy: empty dataset");
  const auto predicted = predicted_classes(cfg, predict_logits(cfg, params, images));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline double accuracy(const ModelConfig& cfg, const ParamSet<float>& params, const Dataset& data) {
  return accuracy_on(cfg, params, data.images, data.labels);
}

/// Attacks the whole dataset in chunks. Chunk c of a PGD attack uses seed
/// attack.seed + (first example index of the chunk), so example i always
/// draws from stream seed + i.
inline Tensor<float> attack_dataset(const ModelConfig& cfg, const ParamSet<float>& params, const Dataset& data,
                                    const AttackConfig& attack, std::size_t chunk = 256) {
  Tensor<float> out = data.images;
  const std::size_t stride = data.example_size();
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    const std::size_t end = std::min(data.size(), begin + chunk);
    const Tensor<float> x = data.images.rows(begin, end);
    const std::vector<int> y(data.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                             data.labels.begin() + static_cast<std::ptrdiff_t>(end));
    Tensor<float> adv;
    switch (attack.kind) {
      case AttackKind::fgsm:
        adv = fgsm(cfg, params, x, y, attack.epsilon, attack.clip_lo, attack.clip_hi);
        break;
      case AttackKind::pgd: {
        AttackConfig a = attack;
        a.seed = attack.seed + begin;
        adv = pgd(cfg, params, x, y, a);
        break;
      }
      case AttackKind::constant_offset:
        adv = constant_offset(x, attack.epsilon, attack.clip_lo, attack.clip_hi);
        break;
      case AttackKind::nonexample_ascent:
        throw std::invalid_argument("attack_dataset: nonexample_ascent has no source examples");
    }
    std::copy(adv.data().begin(), adv.data().end(), out.raw() + begin * stride);
  }
  return out;
}

inline double adversarial_accuracy(const ModelConfig& cfg, const ParamSet<float>& params, const Dataset& data,
                                   const AttackConfig& attack) {
  return accuracy_on(cfg, params, attack_dataset(cfg, params, data, attack), data.labels);
}

struct RobustnessCurve {
  std::vector<double> epsilons;
  std::vector<double> accuracies;
  std::string attack;
  std::string model;

  /// Trapezoid area normalized by the epsilon span (mean accuracy).
  double auc() const {
    if (epsilons.size() < 2) return accuracies.empty() ? 0.0 : accuracies.front();
    double area = 0.0;
    for (std::size_t i = 1; i < epsilons.size(); ++i) {
      area += 0.5 * (accuracies[i] + accuracies[i - 1]) * (epsilons[i] - epsilons[i - 1]);
    }
    return area / (epsilons.back() - epsilons.front());
  }
};

inline void check_sorted_from_zero(const std::vector<double>& xs, const char* what) {
  if (xs.empty() || xs.front() != 0.0 || !std::is_sorted(xs.begin(), xs.end())) {
    throw std::invalid_argument(std::string(what) + ": values must be sorted ascending from 0");
  }
}

/// Accuracy under `attack` at each epsilon; the epsilon 0 point is the clean accuracy.
inline RobustnessCurve robustness_curve(const ModelConfig& cfg, const ParamSet<float>& params, const Dataset& data,
                                        AttackConfig attack, const std::vector<double>& epsilons) {
  check_sorted_from_zero(epsilons, "robustness_curve");
  RobustnessCurve curve;
  curve.attack = to_string(attack.kind);
  curve.model = to_string(cfg.kind);
  curve.epsilons = epsilons;
  for (double eps : epsilons) {
    attack.epsilon = eps;
    curve.accuracies.push_back(eps == 0.0 ? accuracy(cfg, params, data) : adversarial_accuracy(cfg, params, data, attack));
  }
  return curve;
}

struct OffsetSweep {
  RobustnessCurve added;
  RobustnessCurve subtracted;
};

/// Accuracy on clip(x + c) and clip(x - c) for every offset c.
inline OffsetSweep offset_sweep(const ModelConfig& cfg, const ParamSet<float>& params, const Dataset& data,
                                const std::vector<double>& offsets) {
  check_sorted_from_zero(offsets, "offset_sweep");
  OffsetSweep sweep;
  for (RobustnessCurve* c : {&sweep.added, &sweep.subtracted}) {
    c->epsilons = offsets;
    c->model = to_string(cfg.kind);
  }
  sweep.added.attack = "constant_offset_added";
  sweep.subtracted.attack = "constant_offset_subtracted";
  const double clean = accuracy(cfg, params, data);
  for (double c : offsets) {
    if (c == 0.0) {
      sweep.added.accuracies.push_back(clean);
      sweep.subtracted.accuracies.push_back(clean);
      continue;
    }
    sweep.added.accuracies.push_back(
        accuracy_on(cfg, params, constant_offset(data.images, c, data.pixel_lo, data.pixel_hi), data.labels));
    sweep.subtracted.accuracies.push_back(
        accuracy_on(cfg, params, constant_offset(data.images, -c, data.pixel_lo, data.pixel_hi), data.labels));
  }
  return sweep;
}

/// Default offset grid: 0, 0.05, ..., 1.0 scaled to the pixel span.
inline std::vector<double> default_offsets(double span = 1.0) {
  std::vector<double> out;
  for (int k = 0; k <= 20; ++k) out.push_back(span * 0.05 * k);
  return out;
}

inline std::string curve_csv(const std::vector<const RobustnessCurve*>& curves) {
  CsvWriter csv({"model", "attack", "epsilon", "accuracy"});
  for (const RobustnessCurve* c : curves) {
    for (std::size_t i = 0; i < c->epsilons.size(); ++i) csv.add(c->model, c->attack, c->epsilons[i], c->accuracies[i]);
  }
  return csv.str();
}

struct BoundingBox {
  double x0_lo = -2.0, x0_hi = 2.0, x1_lo = -2.0, x1_hi = 2.0;
};

struct GridPoint {
  double x0 = 0.0, x1 = 0.0;
  int predicted = 0;
  double confidence = 0.0;
  double p0 = 0.0, p1 = 0.0;
};

/// Evaluates a 2-D model on a resolution x resolution lattice, row-major in x1.
inline std::vector<GridPoint> boundary_grid(const ModelConfig& cfg, const ParamSet<float>& params,
                                            const BoundingBox& box, std::size_t resolution) {
  if (shape_size(cfg.input_shape) != 2) throw std::invalid_argument("boundary_grid: model input is not 2-D");
  if (resolution < 2) throw std::invalid_argument("boundary_grid: resolution must be >= 2");
  const std::size_t n = resolution * resolution;
  Tensor<float> pts(Shape{n, 2});
  std::vector<GridPoint> grid(n);
  for (std::size_t i = 0; i < resolution; ++i) {
    for (std::size_t j = 0; j < resolution; ++j) {
      GridPoint& g = grid[i * resolution + j];
      g.x1 = box.x1_lo + (box.x1_hi - box.x1_lo) * static_cast<double>(i) / static_cast<double>(resolution - 1);
      g.x0 = box.x0_lo + (box.x0_hi - box.x0_lo) * static_cast<double>(j) / static_cast<double>(resolution - 1);
      pts[2 * (i * resolution + j)] = static_cast<float>(g.x0);
      pts[2 * (i * resolution + j) + 1] = static_cast<float>(g.x1);
    }
  }
  const Tensor<float> logits = predict_logits(cfg, params, pts, 4096);
  const Tensor<float> probs = class_probabilities(cfg, logits);
  const auto predicted = predicted_classes(cfg, logits);
  for (std::size_t k = 0; k < n; ++k) {
    grid[k].predicted = predicted[k];
    grid[k].p0 = probs[2 * k];
    grid[k].p1 = probs[2 * k + 1];
    grid[k].confidence = std::max(grid[k].p0, grid[k].p1);
  }
  return grid;
}

inline std::string grid_csv(const std::vector<GridPoint>& grid) {
  CsvWriter csv({"x0", "x1", "predicted", "confidence", "p0", "p1"});
  for (const auto& g : grid) csv.add(g.x0, g.x1, g.predicted, g.confidence, g.p0, g.p1);
  return csv.str();
}

struct RayRadius {
  double angle = 0.0;
  bool held_out = false;
  std::optional<double> radius;
  double bracket_width = 0.0;
};

struct RadiusSummary {
  std::size_t count = 0;
  double mean = 0.0, min = 0.0, max = 0.0;
  double spread() const { return max - min; }
};

struct RadiusStats {
  std::vector<RayRadius> rays;
  RadiusSummary held_out;
  RadiusSummary trained;
};

inline constexpr int kBisectionIterations = 30;

/// Bisection for the class change along the ray at `angle` between radii
/// r_lo and r_hi. Empty when both ends get the same class.
inline RayRadius bisect_ray(const std::function<int(double, double)>& classify, double angle, double r_lo, double r_hi) {
  RayRadius ray;
  ray.angle = angle;
  const double c = std::cos(angle), s = std::sin(angle);
  auto at = [&](double r) { return classify(r * c, r * s); };
  const int inner = at(r_lo);
  if (inner == at(r_hi)) return ray;
  double lo = r_lo, hi = r_hi;
  for (int i = 0; i < kBisectionIterations; ++i) {
    const double mid = 0.5 * (lo + hi);
    (at(mid) == inner ? lo : hi) = mid;
  }
  ray.radius = 0.5 * (lo + hi);
  ray.bracket_width = hi - lo;
  return ray;
}

/// `per_quadrant` interior angles in each quadrant, avoiding the axes.
inline std::vector<double> quadrant_angles(std::size_t per_quadrant) {
  std::vector<double> out;
  const double quarter = std::numbers::pi / 2;
  for (int q = 0; q < 4; ++q) {
    for (std::size_t k = 1; k <= per_quadrant; ++k) {
      out.push_back(q * quarter + quarter * static_cast<double>(k) / static_cast<double>(per_quadrant + 1));
    }
  }
  return out;
}

inline RadiusSummary summarize(const std::vector<double>& radii) {
  RadiusSummary s;
  s.count = radii.size();
  if (radii.empty()) return s;
  s.min = *std::min_element(radii.begin(), radii.end());
  s.max = *std::max_element(radii.begin(), radii.end());
  double sum = 0.0;
  for (double r : radii) sum += r;
  s.mean = sum / static_cast<double>(radii.size());
  return s;
}

/// Decision radius per angle, summarized separately over angles in the
/// removed quadrants and in the trained ones. Rays without a crossing are
/// kept in `rays` but left out of both summaries.
inline RadiusStats boundary_radius_stats(const std::function<int(double, double)>& classify,
                                         const std::vector<double>& angles, double r_lo, double r_hi,
                                         const std::set<Quadrant>& removed) {
  if (!(r_lo < r_hi)) throw std::invalid_argument("boundary_radius_stats: need r_lo < r_hi");
  RadiusStats stats;
  std::vector<double> held, trained;
  for (double a : angles) {
    RayRadius ray = bisect_ray(classify, a, r_lo, r_hi);
    ray.held_out = removed.contains(quadrant_of(std::cos(a), std::sin(a)));
    if (ray.radius) (ray.held_out ? held : trained).push_back(*ray.radius);
    stats.rays.push_back(ray);
  }
  stats.held_out = summarize(held);
  stats.trained = summarize(trained);
  return stats;
}

inline RadiusStats boundary_radius_stats(const ModelConfig& cfg, const ParamSet<float>& params,
                                         const std::vector<double>& angles, double r_lo, double r_hi,
                                         const std::set<Quadrant>& removed) {
  if (shape_size(cfg.input_shape) != 2) throw std::invalid_argument("boundary_radius_stats: model input is not 2-D");
  auto classify = [&](double x0, double x1) {
    const Tensor<float> pt(Shape{1, 2}, std::vector<float>{static_cast<float>(x0), static_cast<float>(x1)});
    return predicted_classes(cfg, predict_logits(cfg, params, pt)).front();
  };
  return boundary_radius_stats(classify, angles, r_lo, r_hi, removed);
}

inline std::string radius_csv(const RadiusStats& stats) {
  CsvWriter csv({"angle", "held_out", "radius"});
  for (const auto& r : stats.rays) {
    csv.add(r.angle, r.held_out ? 1 : 0, r.radius ? format_number(*r.radius) : std::string("no boundary"));
  }
  return csv.str();
}

/// Symmetric gray map of a 28x28 weight vector: 0 -> 128, +max|w| -> 255, -max|w| -> 0.
template <typename T>
std::vector<std::uint8_t> weight_image_bytes(const Tensor<T>& w) {
  if (w.size() != 28 * 28) throw ShapeError("export_weight_image: expected 784 weights, got " + std::to_string(w.size()));
  const double m = static_cast<double>(max_abs(w));
  std::vector<std::uint8_t> px(w.size(), 128);
  if (m == 0.0) return px;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double u = static_cast<double>(w[i]) / m;
    const double v = u >= 0 ? 128.0 + 127.0 * u : 128.0 + 128.0 * u;
    px[i] = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
  }
  return px;
}

template <typename T>
void export_weight_image(const Tensor<T>& w, const std::filesystem::path& path) {
  write_file(path, encode_pnm(weight_image_bytes(w), 28, 28, 1));
}

/// Image of one example (H x W x C) rescaled from [lo, hi].
template <typename T>
std::string example_pnm(const Tensor<T>& image, double lo, double hi) {
  const Shape& s = image.shape();
  if (s.size() != 3) throw ShapeError("example_pnm: expected H x W x C, got " + shape_str(s));
  return encode_pnm(to_bytes(image, lo, hi), s[0], s[1], s[2]);
}

template <typename T>
std::string confidence_csv(const std::vector<NonExample<T>>& examples) {
  CsvWriter csv({"target", "predicted", "confidence", "target_probability"});
  for (const auto& e : examples) csv.add(e.target, e.predicted, e.confidence, e.target_probability);
  return csv.str();
}

template <typename T>
double mean_confidence(const std::vector<NonExample<T>>& examples) {
  double sum = 0.0;
  for (const auto& e : examples) sum += e.confidence;
  return examples.empty() ? 0.0 : sum / static_cast<double>(examples.size());
}

}  // namespace robustbench
