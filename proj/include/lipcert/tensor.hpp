#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <vector>

#include "lipcert/errors.hpp"

namespace lipcert {

// Dense n-dimensional array of 64-bit floats, row-major.
// The single numeric currency of the library: rank-1 tensors are vectors,
// rank-2 tensors double as matrices (rows x cols), rank-3/4 hold feature
// maps and batches thereof.
class Tensor {
 public:
  Tensor() = default;

  // Zero-filled tensor with the given shape.
  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

  // Takes ownership of data; size must match the shape.
  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_))
      throw ShapeMismatch("tensor data length does not match shape");
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape));
  }

  static Tensor full(std::vector<std::size_t> shape, double value) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = value;
    return t;
  }

  // External-data entry point; rejects NaN/Inf.
  static Tensor from_values(std::vector<std::size_t> shape,
                            std::vector<double> data) {
    Tensor t(std::move(shape), std::move(data));
    t.check_finite();
    return t;
  }

  // rows x cols matrix from a nested initializer list; rejects NaN/Inf.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> m) {
    std::size_t rows = m.size();
    std::size_t cols = rows ? m.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(rows * cols);
    for (const auto& row : m) {
      if (row.size() != cols) throw ShapeMismatch("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return from_values({rows, cols}, std::move(data));
  }

  static Tensor vector(std::initializer_list<double> v) {
    return from_values({v.size()}, std::vector<double>(v));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  // Rank-2 accessors.
  std::size_t rows() const {
    assert(rank() == 2);
    return shape_[0];
  }
  std::size_t cols() const {
    assert(rank() == 2);
    return shape_[1];
  }
  double& operator()(std::size_t i, std::size_t j) {
    assert(rank() == 2 && i < shape_[0] && j < shape_[1]);
    return data_[i * shape_[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    assert(rank() == 2 && i < shape_[0] && j < shape_[1]);
    return data_[i * shape_[1] + j];
  }

  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> span() { return {data_.data(), data_.size()}; }
  std::span<const double> span() const { return {data_.data(), data_.size()}; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // Same data, new shape (element count preserved).
  Tensor reshaped(std::vector<std::size_t> shape) const {
    if (count(shape) != data_.size())
      throw ShapeMismatch("reshape changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  void check_finite() const {
    if (!all_finite()) throw Error("non-finite value in tensor");
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Rank-2 tensors serve as matrices throughout the numerics code.
using Matrix = Tensor;

}  // namespace lipcert
