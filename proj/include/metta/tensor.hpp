#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "metta/errors.hpp"

namespace metta {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. A default-constructed tensor is the empty value
/// (rank 0, no data); every other tensor has positive dimensions and
/// product(shape) == data.size().
template <std::floating_point T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_size(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + metta::to_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // [C,H,W] accessors.
  T& at(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  const T& at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  template <std::floating_point U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    if (empty()) return {};
    return BasicTensor<U>(shape_, std::move(out));
  }

  BasicTensor reshaped(Shape shape) const { return BasicTensor(std::move(shape), data_); }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + metta::to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using DTensor = BasicTensor<double>;

// Byte-level equality: distinguishes -0.0 from 0.0 and compares NaN payloads.
template <std::floating_point T>
bool bitwise_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

template <std::floating_point T>
bool all_finite(const BasicTensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

inline void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected) {
    throw ShapeError(std::string(what) + ": expected shape " + to_string(expected) + ", got " +
                     to_string(t.shape()));
  }
}

}  // namespace metta
