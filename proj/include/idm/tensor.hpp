#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "idm/errors.hpp"

namespace idm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << ',';
    oss << shape[i];
  }
  oss << ')';
  return oss.str();
}

/// 64-byte aligned storage, so vectorized reductions see the same alignment
/// (and round identically) on every run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), alignment));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

/// Dense row-major array of reals. Plain value type; the autodiff tape wraps
/// these and treats them as immutable once recorded.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, AlignedAllocator<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}

  Tensor(Shape shape, const std::vector<T>& values)
      : Tensor(std::move(shape), Storage(values.begin(), values.end())) {}

  Tensor(Shape shape, Storage values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != numel(shape_)) {
      throw DimensionError("tensor of shape " + idm::to_string(shape_) +
                           " needs " + std::to_string(numel(shape_)) +
                           " values, got " + std::to_string(data_.size()));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, Storage{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) {
      throw DimensionError("axis " + std::to_string(i) + " out of range for " +
                           idm::to_string(shape_));
    }
    return shape_[i];
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T> vec() const { return {data_.begin(), data_.end()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T item() const {
    if (data_.size() != 1) {
      throw DimensionError("item() on tensor of shape " +
                           idm::to_string(shape_));
    }
    return data_[0];
  }

  Tensor reshaped(Shape shape) const& {
    Tensor out = *this;
    return std::move(out).reshaped(std::move(shape));
  }
  Tensor reshaped(Shape shape) && {
    if (numel(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + idm::to_string(shape_) +
                           " to " + idm::to_string(shape));
    }
    shape_ = std::move(shape);
    return std::move(*this);
  }

  template <typename U>
  Tensor<U> cast() const {
    typename Tensor<U>::Storage out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Rows [begin, end) along axis 0.
  Tensor slice0(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || begin > end || end > shape_[0]) {
      throw IndexError("slice [" + std::to_string(begin) + "," +
                       std::to_string(end) + ") out of range for " +
                       idm::to_string(shape_));
    }
    const std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(std::move(s),
                  Storage(data_.begin() + begin * stride,
                                 data_.begin() + end * stride));
  }

  /// Rows picked along axis 0, in the given order.
  Tensor gather0(std::span<const std::size_t> rows) const {
    if (shape_.empty()) throw DimensionError("gather0 on a scalar");
    const std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = rows.size();
    Storage out;
    out.reserve(rows.size() * stride);
    for (std::size_t r : rows) {
      if (r >= shape_[0]) {
        throw IndexError("row " + std::to_string(r) + " out of range for " +
                         idm::to_string(shape_));
      }
      out.insert(out.end(), data_.begin() + r * stride,
                 data_.begin() + (r + 1) * stride);
    }
    return Tensor(std::move(s), std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Storage data_;
};

/// Concatenates along axis 0; all trailing extents must agree.
template <typename T>
Tensor<T> concat0(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat0 of nothing");
  Shape s = parts.front().shape();
  if (s.empty()) throw DimensionError("concat0 of scalars");
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != s.size() ||
        !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat0 shape mismatch: " + to_string(s) +
                           " vs " + to_string(p.shape()));
    }
    rows += p.dim(0);
  }
  s[0] = rows;
  typename Tensor<T>::Storage out;
  out.reserve(numel(s));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return Tensor<T>(std::move(s), std::move(out));
}

}  // namespace idm
