// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uap/error.hpp"

namespace uap {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 4;
inline constexpr double kCosineFloor = 1e-12;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Rank-1..4 row-major array of doubles.
class DenseTensor {
 public:
  DenseTensor() = default;

  explicit DenseTensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  DenseTensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    require(data_.size() == shape_numel(shape_), ErrorCode::kShapeMismatch,
            "data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }

  static DenseTensor vector(std::initializer_list<double> values) {
    return DenseTensor({values.size()}, std::vector<double>(values));
  }

  static DenseTensor zeros_like(const DenseTensor& t) { return DenseTensor(t.shape_, 0.0); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  std::span<double> row(std::size_t i) { return {data_.data() + i * shape_[1], shape_[1]}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * shape_[1], shape_[1]}; }

  DenseTensor reshaped(Shape shape) const { return DenseTensor(std::move(shape), data_); }

  DenseTensor& operator+=(const DenseTensor& o) {
    check_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  DenseTensor& operator-=(const DenseTensor& o) {
    check_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  DenseTensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }
  // this += s * o
  DenseTensor& axpy(double s, const DenseTensor& o) {
    check_same_shape(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
    return *this;
  }

  friend DenseTensor operator+(DenseTensor a, const DenseTensor& b) { return a += b; }
  friend DenseTensor operator-(DenseTensor a, const DenseTensor& b) { return a -= b; }
  friend DenseTensor operator*(DenseTensor a, double s) { return a *= s; }
  friend DenseTensor operator*(double s, DenseTensor a) { return a *= s; }

  // Bitwise equality of shape and payload.
  friend bool operator==(const DenseTensor& a, const DenseTensor& b) {
    return a.shape_ == b.shape_ &&
           (a.data_.empty() || std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(double)) == 0);
  }

  double sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
  }
  double l2_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }
  double linf_norm() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void check_same_shape(const DenseTensor& o) const {
    require(shape_ == o.shape_, ErrorCode::kShapeMismatch, shape_str(shape_) + " vs " + shape_str(o.shape_));
  }

 private:
  static void validate_shape(const Shape& s) {
    require(!s.empty() && s.size() <= kMaxRank, ErrorCode::kRankOutOfRange,
            "rank " + std::to_string(s.size()) + " outside 1..4");
    for (std::size_t e : s) require(e > 0, ErrorCode::kShapeMismatch, "zero extent in " + shape_str(s));
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void ensure_finite(const DenseTensor& t, const char* what) {
  require(t.all_finite(), ErrorCode::kNonFinite, std::string(what) + " contains NaN/Inf");
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// a.b / max(|a||b|, 1e-12). Throws ZeroVector only when both inputs are
// (numerically) zero.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && !a.empty(), ErrorCode::kShapeMismatch,
          "cosine of vectors with lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  const double na = norm2(a);
  const double nb = norm2(b);
  require(na >= kCosineFloor || nb >= kCosineFloor, ErrorCode::kZeroVector, "cosine of two zero vectors");
  return dot(a, b) / std::max(na * nb, kCosineFloor);
}

inline double cosine(const DenseTensor& a, const DenseTensor& b) { return cosine(a.data(), b.data()); }

// Gradient of cosine(a, b) with respect to b, accumulated as out += scale * d/db.
inline void cosine_grad_b(std::span<const double> a, std::span<const double> b, double scale,
                          std::span<double> out) {
  const double na = norm2(a);
  const double nb = norm2(b);
  const double denom = na * nb;
  if (denom < kCosineFloor) {
    // Floored denominator: cos = a.b / floor is linear in b.
    for (std::size_t i = 0; i < b.size(); ++i) out[i] += scale * a[i] / kCosineFloor;
    return;
  }
  const double c = dot(a, b) / denom;
  const double inv_nb2 = 1.0 / (nb * nb);
  for (std::size_t i = 0; i < b.size(); ++i) out[i] += scale * (a[i] / denom - c * b[i] * inv_nb2);
}

// Elementwise clip into [-eps, eps].
inline DenseTensor clamp_linf(DenseTensor t, double eps) {
  require(eps >= 0.0, ErrorCode::kInvalidArgument, "negative l_inf budget");
  for (double& v : t.data()) v = std::clamp(v, -eps, eps);
  return t;
}

// Central differences, one coordinate at a time.
template <class F>
DenseTensor finite_diff_grad(F&& f, const DenseTensor& x, double h) {
  require(h > 0.0, ErrorCode::kInvalidArgument, "finite-difference step must be positive");
  DenseTensor probe = x;
  DenseTensor grad = DenseTensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(std::as_const(probe));
    probe[i] = orig - h;
    const double fm = f(std::as_const(probe));
    probe[i] = orig;
    require(std::isfinite(fp) && std::isfinite(fm), ErrorCode::kNonFinite,
            "objective not finite at coordinate " + std::to_string(i));
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

// Dense matrix helpers over rank-2 tensors. Naming follows BLAS: t = transposed.

// C = A B
inline DenseTensor matmul(const DenseTensor& a, const DenseTensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), ErrorCode::kShapeMismatch,
          "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  DenseTensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.raw() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.raw()[i * k + p];
      const double* bp = b.raw() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

// C = A B^T
inline DenseTensor matmul_nt(const DenseTensor& a, const DenseTensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), ErrorCode::kShapeMismatch,
          "matmul_nt " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  DenseTensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c.raw()[i * n + j] = dot(a.row(i), b.row(j));
  (void)k;
  return c;
}

// C = A^T B
inline DenseTensor matmul_tn(const DenseTensor& a, const DenseTensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0), ErrorCode::kShapeMismatch,
          "matmul_tn " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  DenseTensor c({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a.raw() + p * m;
    const double* bp = b.raw() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      double* ci = c.raw() + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
  return c;
}

// Elementwise mean of same-shaped tensors, summed in index order.
inline DenseTensor mean_of(std::span<const DenseTensor> items) {
  require(!items.empty(), ErrorCode::kInvalidArgument, "mean of an empty list");
  DenseTensor acc = DenseTensor::zeros_like(items.front());
  for (const DenseTensor& t : items) acc += t;
  acc *= 1.0 / static_cast<double>(items.size());
  return acc;
}

}  // namespace uap
