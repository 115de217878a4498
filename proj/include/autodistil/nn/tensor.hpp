#pragma once

#include <concepts>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "autodistil/error.hpp"

namespace autodistil::nn {

/// Strided row-major 2-D window. `ld` is the row stride of the underlying
/// buffer, so a prefix slice of a wider matrix is just a smaller rows/cols.
template <class T>
struct MatRef {
  T* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t ld = 0;

  T& operator()(std::size_t r, std::size_t c) const { return data[r * ld + c]; }
  T* row(std::size_t r) const { return data + r * ld; }
  std::size_t size() const { return rows * cols; }
  operator MatRef<const T>() const { return {data, rows, cols, ld}; }  // NOLINT(implicit)
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
  return s + "]";
}

/// Dense row-major tensor. Operations view it as a matrix whose columns are
/// the last dimension and whose rows are everything before it.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, T fill = T{0})
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}
  Tensor(std::vector<std::size_t> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_string(shape_));
  }

  static std::size_t numel(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : size() / cols(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  MatRef<T> mat() noexcept { return {data_.data(), rows(), cols(), cols()}; }
  MatRef<const T> mat() const noexcept { return {data_.data(), rows(), cols(), cols()}; }

  /// Same data, new shape of equal element count.
  Tensor reshaped(std::vector<std::size_t> shape) const {
    if (numel(shape) != size())
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  static Tensor from(MatRef<const T> m) {
    Tensor out({m.rows, m.cols});
    for (std::size_t r = 0; r < m.rows; ++r)
      for (std::size_t c = 0; c < m.cols; ++c) out(r, c) = m(r, c);
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

}  // namespace autodistil::nn
