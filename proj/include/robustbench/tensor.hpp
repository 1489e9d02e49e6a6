#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace robustbench {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Raised when operand shapes do not conform to an operation's signature.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline ShapeError shape_mismatch(const std::string& op, const Shape& a, const Shape& b) {
  return ShapeError(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

/// Dense row-major n-dimensional array. A rank-0 tensor (empty shape) holds one
/// scalar.
template <typename T = float>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("Tensor: shape " + shape_str(shape_) + " needs " +
                       std::to_string(shape_size(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() & { return data_; }
  std::span<const T> data() const& { return data_; }
  // A span into a temporary would dangle.
  std::span<const T> data() const&& = delete;
  const std::vector<T>& values() const& { return data_; }
  std::vector<T> values() && { return std::move(data_); }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T item() const {
    if (data_.size() != 1) {
      throw ShapeError("Tensor::item: expected one element, shape " + shape_str(shape_));
    }
    return data_.front();
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) throw shape_mismatch("reshape", shape_, shape);
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  /// Contiguous slice of the leading axis: rows [begin, end).
  Tensor rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || end > shape_[0] || begin > end) {
      throw ShapeError("Tensor::rows: range out of bounds for " + shape_str(shape_));
    }
    const std::size_t stride = data_.size() / std::max<std::size_t>(shape_[0], 1);
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(std::move(s),
                  std::vector<T>(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                 data_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
  }

  /// Gather rows of the leading axis by index.
  Tensor gather_rows(std::span<const std::size_t> index) const {
    const std::size_t stride = shape_.empty() ? 1 : data_.size() / std::max<std::size_t>(shape_[0], 1);
    Shape s = shape_;
    s[0] = index.size();
    std::vector<T> out(index.size() * stride);
    for (std::size_t r = 0; r < index.size(); ++r) {
      if (index[r] >= shape_[0]) throw ShapeError("Tensor::gather_rows: index out of range");
      std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(index[r] * stride), stride,
                  out.begin() + static_cast<std::ptrdiff_t>(r * stride));
    }
    return Tensor(std::move(s), std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  void check_extents() const {
    for (std::size_t d : shape_) {
      if (d == 0 && !shape_.empty() && shape_[0] != 0) {
        throw ShapeError("Tensor: zero extent outside the leading axis in " + shape_str(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<T> data_ = std::vector<T>(1, T{0});
};

template <typename T>
T max_abs(const Tensor<T>& t) {
  T m{0};
  for (T v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
T linf_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw shape_mismatch("linf_distance", a.shape(), b.shape());
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace robustbench
