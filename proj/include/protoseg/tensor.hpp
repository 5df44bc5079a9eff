// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace protoseg {

/// Rank-4 NHWC extent. Matrices are expressed as (1, 1, rows, cols) and
/// token maps as (1, H, W, C) viewed as (H*W) x C.
struct Shape {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * h * w * c;
  }
  /// Number of rows when the tensor is viewed as a (n*h*w) x c matrix.
  std::size_t rows() const { return static_cast<std::size_t>(n) * h * w; }
  int dim(int axis) const;

  bool operator==(const Shape&) const = default;
  std::string str() const;
};

std::ostream& operator<<(std::ostream& os, const Shape& s);

/// Dense double-precision NHWC tensor with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(shape, 0.0); }
  static Tensor filled(Shape shape, double v) { return Tensor(shape, v); }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  std::size_t index(int n, int h, int w, int c) const {
    return ((static_cast<std::size_t>(n) * shape_.h + h) * shape_.w + w) * shape_.c + c;
  }
  double& at(int n, int h, int w, int c) { return data_[index(n, h, w, c)]; }
  const double& at(int n, int h, int w, int c) const { return data_[index(n, h, w, c)]; }
  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  /// Same data, new extent. Element counts must agree.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;
  double max_abs() const;
  double sum() const;

 private:
  Shape shape_{};
  std::vector<double> data_;
};

/// Element-wise maximum absolute difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace protoseg
