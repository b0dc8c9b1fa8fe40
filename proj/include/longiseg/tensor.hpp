#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "longiseg/error.hpp"

namespace longiseg {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_string(const Shape& shape);

/// Dense row-major array. Volumetric network activations use the layout
/// [batch, channel, w, h, d]; matrices are [rows, cols].
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    for (int d : shape_) require(d >= 0, ErrorKind::shape, "negative tensor extent");
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_size(shape_), ErrorKind::shape,
            "tensor data size does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Element of a rank-2 tensor.
  T& at(int r, int c) noexcept { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
  const T& at(int r, int c) const noexcept {
    return data_[static_cast<std::size_t>(r) * shape_[1] + c];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data under a new shape of equal element count.
  BasicTensor reshaped(Shape shape) const& {
    return BasicTensor(std::move(shape), data_);
  }
  BasicTensor reshaped(Shape shape) && {
    return BasicTensor(std::move(shape), std::move(data_));
  }

  template <typename U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw Error(ErrorKind::shape,
                std::string(what) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
}

/// Number of spatial voxels of a [N, C, ...spatial] tensor.
inline std::size_t spatial_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) n *= static_cast<std::size_t>(shape[i]);
  return n;
}

}  // namespace longiseg
