#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vseg/error.hpp"

namespace vseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  return os.str();
}

/// Dense row-major array. Four-dimensional tensors are laid out as
/// (batch, channel, height, width).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // 4-D accessors.
  std::size_t n() const { return shape_.at(0); }
  std::size_t c() const { return shape_.at(1); }
  std::size_t h() const { return shape_.at(2); }
  std::size_t w() const { return shape_.at(3); }

  std::size_t offset(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const noexcept {
    return ((b * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x;
  }
  T& at(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) noexcept {
    return data_[offset(b, ch, y, x)];
  }
  const T& at(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const noexcept {
    return data_[offset(b, ch, y, x)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  void require_same_shape(const Tensor& o, const char* where) const {
    if (shape_ != o.shape_)
      throw ShapeError(std::string(where) + ": shape " + shape_string(shape_) + " vs " +
                       shape_string(o.shape_));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
void require_finite(const Tensor<T>& t, const char* where) {
  if (!t.all_finite()) throw NumericError(std::string(where) + ": non-finite value in tensor");
}

template <typename T>
void require_rank4(const Tensor<T>& t, const char* where) {
  if (t.rank() != 4)
    throw ShapeError(std::string(where) + ": expected a 4-D tensor, got " + shape_string(t.shape()));
}

}  // namespace vseg
