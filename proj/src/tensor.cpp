// SPDX-License-Identifier: Apache-2.0
#include "protoseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "protoseg/error.hpp"

namespace protoseg {

int Shape::dim(int axis) const {
  switch (axis) {
    case 0: return n;
    case 1: return h;
    case 2: return w;
    case 3: return c;
    default: throw ContractError("axis out of range: " + std::to_string(axis));
  }
}

std::string Shape::str() const {
  std::ostringstream os;
  os << *this;
  return os.str();
}

std::ostream& operator<<(std::ostream& os, const Shape& s) {
  return os << s.n << "x" << s.h << "x" << s.w << "x" << s.c;
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape) {
  PROTOSEG_REQUIRE(shape.n >= 0 && shape.h >= 0 && shape.w >= 0 && shape.c >= 0,
                   "negative tensor extent " + shape.str());
  data_.assign(shape.numel(), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  PROTOSEG_REQUIRE(data_.size() == shape.numel(),
                   "tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                       shape.str());
}

Tensor Tensor::reshaped(Shape shape) const {
  PROTOSEG_REQUIRE(shape.numel() == numel(),
                   "cannot reshape " + shape_.str() + " to " + shape.str());
  return Tensor(shape, data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  PROTOSEG_REQUIRE(a.shape() == b.shape(),
                   "shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace protoseg
