#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "simulmt/error.hpp"

namespace simulmt {

/// Dense row-major array of rank 1..3 with an explicit shape.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, T fill = T{}) : shape_(std::move(shape)) {
    require(!shape_.empty() && shape_.size() <= 3, "tensor rank must be 1..3");
    data_.assign(count(shape_), fill);
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return rank() >= 2 ? shape_[1] : 1; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Appends one row to a rank-2 tensor.
  void push_row(std::span<const T> values) {
    require(rank() == 2 && values.size() == shape_[1], "push_row width mismatch");
    data_.insert(data_.end(), values.begin(), values.end());
    ++shape_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.values().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

// Small dense kernels. Weight matrices are stored input-major, W[in x out],
// so the forward product y += x^T W is a sequence of contiguous axpys.

template <typename T>
inline void axpy(std::span<T> y, std::span<const T> x, T a) {
  T* __restrict yp = y.data();
  const T* __restrict xp = x.data();
  const std::size_t n = y.size();
  for (std::size_t i = 0; i < n; ++i) yp[i] += a * xp[i];
}

template <typename T>
inline T dot(std::span<const T> a, std::span<const T> b) {
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// y += x^T W, W is [x.size() x y.size()].
template <typename T>
inline void matvec_acc(std::span<T> y, const Tensor<T>& w, std::span<const T> x,
                       std::size_t row_offset = 0) {
  for (std::size_t k = 0; k < x.size(); ++k) {
    const T xk = x[k];
    if (xk != T{0}) axpy<T>(y, w.row(row_offset + k), xk);
  }
}

/// dx += W dy, the transpose product used in backward passes.
template <typename T>
inline void matvec_t_acc(std::span<T> dx, const Tensor<T>& w, std::span<const T> dy,
                         std::size_t row_offset = 0) {
  for (std::size_t k = 0; k < dx.size(); ++k) dx[k] += dot<T>(w.row(row_offset + k), dy);
}

/// dW += x dy^T.
template <typename T>
inline void outer_acc(Tensor<T>& dw, std::span<const T> x, std::span<const T> dy,
                      std::size_t row_offset = 0) {
  for (std::size_t k = 0; k < x.size(); ++k) {
    const T xk = x[k];
    if (xk != T{0}) axpy<T>(dw.row(row_offset + k), dy, xk);
  }
}

template <typename T>
inline T sigmoid(T x) {
  if (x >= 0) {
    return T{1} / (T{1} + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T{1} + e);
}

/// Numerically stable softmax in place.
template <typename T>
inline void softmax_inplace(std::span<T> v) {
  if (v.empty()) return;
  const T m = *std::max_element(v.begin(), v.end());
  T sum = 0;
  for (auto& x : v) {
    x = std::exp(x - m);
    sum += x;
  }
  for (auto& x : v) x /= sum;
}

/// log-softmax written to `out` (same size as `logits`).
template <typename T>
inline void log_softmax(std::span<const T> logits, std::span<T> out) {
  const T m = *std::max_element(logits.begin(), logits.end());
  T sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += std::exp(logits[i] - m);
  const T lse = m + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

/// Index of the maximum; ties go to the smallest index.
template <typename T>
inline std::size_t argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

/// FNV-1a over the raw bytes of a tensor's values, for bit-identity checks.
template <typename T>
inline std::uint64_t checksum(const Tensor<T>& t, std::uint64_t h = 0xCBF29CE484222325ULL) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
  for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace simulmt
