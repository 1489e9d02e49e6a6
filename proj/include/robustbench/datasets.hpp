#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "robustbench/random.hpp"
#include "robustbench/tensor.hpp"

namespace robustbench {

/// Malformed or missing dataset file.
class DataError : public std::runtime_error {
 public:
  enum class Kind { missing_file, truncated_header, magic_mismatch, truncated_payload, count_mismatch, bad_length, empty };

  DataError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Images (N x H x W x C, or N x D) with integer labels.
struct Dataset {
  Tensor<float> images{Shape{0, 1}};
  std::vector<int> labels;
  float pixel_lo = 0.0F;
  float pixel_hi = 1.0F;
  int class_count = 0;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  /// Shape of one example (images.shape() without the leading axis).
  Shape example_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

  std::size_t example_size() const { return shape_size(example_shape()); }

  Tensor<float> batch(std::span<const std::size_t> index) const { return images.gather_rows(index); }

  std::vector<int> batch_labels(std::span<const std::size_t> index) const {
    std::vector<int> out;
    out.reserve(index.size());
    for (std::size_t i : index) out.push_back(labels.at(i));
    return out;
  }

  /// Keep the examples whose index is listed.
  Dataset subset(std::span<const std::size_t> index) const {
    Dataset d;
    d.images = batch(index);
    d.labels = batch_labels(index);
    d.pixel_lo = pixel_lo;
    d.pixel_hi = pixel_hi;
    d.class_count = class_count;
    return d;
  }

  Dataset head(std::size_t n) const {
    std::vector<std::size_t> index(std::min(n, size()));
    for (std::size_t i = 0; i < index.size(); ++i) index[i] = i;
    return subset(index);
  }
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::missing_file, "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;

/// MNIST IDX pair. Pixels are scaled to [0,1]; images come back as N x H x W x 1.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  using Kind = DataError::Kind;
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);

  if (img.size() < 16) throw DataError(Kind::truncated_header, images_path.string() + ": truncated header");
  if (lab.size() < 8) throw DataError(Kind::truncated_header, labels_path.string() + ": truncated header");
  if (detail::read_be32(img, 0) != kIdxImageMagic) {
    throw DataError(Kind::magic_mismatch, images_path.string() + ": magic mismatch (expected 0x00000803)");
  }
  if (detail::read_be32(lab, 0) != kIdxLabelMagic) {
    throw DataError(Kind::magic_mismatch, labels_path.string() + ": magic mismatch (expected 0x00000801)");
  }
  const std::size_t n = detail::read_be32(img, 4);
  const std::size_t rows = detail::read_be32(img, 8);
  const std::size_t cols = detail::read_be32(img, 12);
  const std::size_t n_labels = detail::read_be32(lab, 4);
  if (n != n_labels) {
    throw DataError(Kind::count_mismatch, "count mismatch: " + std::to_string(n) + " images vs " +
                                              std::to_string(n_labels) + " labels");
  }
  if (img.size() < 16 + n * rows * cols) {
    throw DataError(Kind::truncated_payload, images_path.string() + ": truncated payload");
  }
  if (lab.size() < 8 + n) throw DataError(Kind::truncated_payload, labels_path.string() + ": truncated payload");

  Dataset d;
  d.images = Tensor<float>(Shape{n, rows, cols, 1});
  for (std::size_t i = 0; i < n * rows * cols; ++i) d.images[i] = static_cast<float>(img[16 + i]) / 255.0F;
  d.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.pixel_lo = 0.0F;
  d.pixel_hi = 1.0F;
  d.class_count = std::max(10, max_label + 1);
  return d;
}

/// Directory holding the four MNIST IDX files: `dir` itself or `dir/mnist`.
inline std::filesystem::path find_mnist(const std::filesystem::path& dir) {
  for (const auto& cand : {dir, dir / "mnist"}) {
    if (std::filesystem::exists(cand / "train-images-idx3-ubyte")) return cand;
  }
  throw DataError(DataError::Kind::missing_file, "no MNIST IDX files under " + dir.string());
}

/// Training (60000) or test (10000) split of MNIST from `dir`.
inline Dataset load_mnist(const std::filesystem::path& dir, bool training_split) {
  const auto root = find_mnist(dir);
  const std::string prefix = training_split ? "train" : "t10k";
  return load_idx(root / (prefix + "-images-idx3-ubyte"), root / (prefix + "-labels-idx1-ubyte"));
}

inline constexpr int kThreeLabel = 1;
inline constexpr int kSevenLabel = 0;

/// Digits 3 and 7 only, relabeled 3 -> 1 and 7 -> 0.
inline Dataset filter_three_seven(const Dataset& d) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.labels[i] == 3 || d.labels[i] == 7) keep.push_back(i);
  }
  Dataset out = d.subset(keep);
  for (int& label : out.labels) label = label == 3 ? kThreeLabel : kSevenLabel;
  out.class_count = 2;
  return out;
}

/// Elementwise mean of all images carrying `label`.
inline Tensor<float> average_class_image(const Dataset& d, int label) {
  const std::size_t stride = d.example_size();
  std::vector<double> sum(stride, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.labels[i] != label) continue;
    ++count;
    const float* px = d.images.raw() + i * stride;
    for (std::size_t j = 0; j < stride; ++j) sum[j] += px[j];
  }
  if (count == 0) throw std::invalid_argument("average_class_image: class " + std::to_string(label) + " absent");
  Tensor<float> out(d.example_shape());
  for (std::size_t j = 0; j < stride; ++j) out[j] = static_cast<float>(sum[j] / static_cast<double>(count));
  return out;
}

/// (x - mean) / max(stddev, 1/sqrt(count)) over one image.
template <typename T>
Tensor<T> per_image_standardize(const Tensor<T>& x) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (T v : x.data()) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (T v : x.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double denom = std::max(std::sqrt(var), 1.0 / std::sqrt(static_cast<double>(n)));
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>((x[i] - mean) / denom);
  return out;
}

/// Sign pattern of the first two coordinates: (+1|-1, +1|-1). Zero counts as +.
using Quadrant = std::pair<int, int>;

inline Quadrant quadrant_of(double x0, double x1) { return {x0 < 0 ? -1 : 1, x1 < 0 ? -1 : 1}; }

struct SpheresConfig {
  std::size_t dim = 2;
  double inner_radius = 1.0;
  double outer_radius = 1.3;
  std::size_t samples_per_class = 5000;
  std::set<Quadrant> removed_quadrants{{1, -1}, {-1, 1}};
  std::uint64_t seed = 0;

  void validate() const {
    if (dim < 2) throw std::invalid_argument("spheres: dim must be >= 2");
    if (!(inner_radius > 0 && inner_radius < outer_radius)) {
      throw std::invalid_argument("spheres: need 0 < inner_radius < outer_radius");
    }
    if (samples_per_class == 0) throw std::invalid_argument("spheres: samples_per_class must be positive");
  }
};

/// Two concentric spheres: label 0 on the inner radius, 1 on the outer. Each
/// point is a normalized isotropic Gaussian draw. The training split drops
/// points whose first-two-coordinate sign pattern is in removed_quadrants.
inline Dataset spheres_generate(const SpheresConfig& cfg, bool training_split) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<float> points;
  std::vector<int> labels;
  std::vector<double> p(cfg.dim);
  const std::array<double, 2> radii{cfg.inner_radius, cfg.outer_radius};
  for (int label = 0; label < 2; ++label) {
    for (std::size_t s = 0; s < cfg.samples_per_class; ++s) {
      double norm = 0.0;
      do {
        norm = 0.0;
        for (double& v : p) {
          v = rng.normal();
          norm += v * v;
        }
      } while (norm == 0.0);
      norm = std::sqrt(norm);
      for (double& v : p) v = v / norm * radii[static_cast<std::size_t>(label)];
      if (training_split && cfg.removed_quadrants.contains(quadrant_of(p[0], p[1]))) continue;
      for (double v : p) points.push_back(static_cast<float>(v));
      labels.push_back(label);
    }
  }
  if (labels.empty()) throw DataError(DataError::Kind::empty, "spheres: empty training set");
  Dataset d;
  d.images = Tensor<float>(Shape{labels.size(), cfg.dim}, std::move(points));
  d.labels = std::move(labels);
  d.pixel_lo = static_cast<float>(-cfg.outer_radius);
  d.pixel_hi = static_cast<float>(cfg.outer_radius);
  d.class_count = 2;
  return d;
}

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// CIFAR-10 binary batch: records of 1 label byte + 3072 CHW pixel bytes.
/// Values stay in [0,255]; images are reordered to 32 x 32 x 3.
inline Dataset load_cifar10_binary(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() % kCifarRecordBytes != 0 || bytes.empty()) {
    throw DataError(DataError::Kind::bad_length,
                    path.string() + ": length " + std::to_string(bytes.size()) + " is not a multiple of 3073");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Dataset d;
  d.images = Tensor<float>(Shape{n, 32, 32, 3});
  d.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
    d.labels[r] = rec[0];
    if (rec[0] > 9) throw DataError(DataError::Kind::bad_length, path.string() + ": label byte out of range");
    float* out = d.images.raw() + r * 3072;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < 1024; ++i) out[i * 3 + c] = static_cast<float>(rec[1 + c * 1024 + i]);
    }
  }
  d.pixel_lo = 0.0F;
  d.pixel_hi = 255.0F;
  d.class_count = 10;
  return d;
}

}  // namespace robustbench
