#pragma once

#include <atwb/error.hpp>

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace atwb {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// Dense row-major n-dimensional array. Plain value type; gradients live on Var.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), values_(element_count(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_extents();
    if (values_.size() != element_count(shape_)) {
      throw ShapeError("Tensor", "element count " + std::to_string(values_.size()) +
                                     " does not match shape " + to_string(shape_));
    }
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  // NCHW element access for rank-4 tensors.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return values_[offset(n, c, h, w)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return values_[offset(n, c, h, w)];
  }

  void fill(T value) { std::fill(values_.begin(), values_.end(), value); }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != size()) {
      throw ShapeError("reshape", "cannot view " + to_string(shape_) + " as " + to_string(shape));
    }
    return Tensor(std::move(shape), values_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(values_.begin(), values_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  // Rows [begin, end) along the leading axis.
  Tensor slice_rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || begin > end || end > shape_[0]) {
      throw ShapeError("slice_rows", "range [" + std::to_string(begin) + "," +
                                         std::to_string(end) + ") outside " + to_string(shape_));
    }
    const std::size_t stride = shape_[0] ? size() / shape_[0] : 0;
    Shape shape = shape_;
    shape[0] = end - begin;
    return Tensor(std::move(shape),
                  std::vector<T>(values_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                 values_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
  }

  // Same shape and identical bit patterns.
  bool bitwise_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           (values_.empty() ||
            std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(T)) == 0);
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_extents() const {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] == 0) {
        throw ShapeError("Tensor", "axis " + std::to_string(i) + " has zero extent in " +
                                       to_string(shape_));
      }
    }
  }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  std::vector<T> values_;
};

// Stacks rank-k tensors of identical shape into a rank-(k+1) batch.
template <typename T>
Tensor<T> stack_rows(std::span<const Tensor<T>> rows) {
  if (rows.empty()) throw ValueError("stack_rows: no rows");
  Shape shape{rows.size()};
  shape.insert(shape.end(), rows[0].shape().begin(), rows[0].shape().end());
  std::vector<T> values;
  values.reserve(element_count(shape));
  for (const auto& row : rows) {
    if (row.shape() != rows[0].shape()) {
      throw ShapeError("stack_rows", "row shape " + to_string(row.shape()) + " differs from " +
                                         to_string(rows[0].shape()));
    }
    values.insert(values.end(), row.values().begin(), row.values().end());
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

}  // namespace atwb
