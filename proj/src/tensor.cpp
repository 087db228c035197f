// SPDX-License-Identifier: Apache-2.0
#include "fpcc/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>

#include "fpcc/errors.hpp"

namespace fpcc {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_dims(const Shape& shape) {
  for (std::size_t d : shape)
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_string(shape));
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_dims(shape_);
  if (!std::isfinite(fill)) throw NumericError("non-finite fill value");
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_dims(shape_);
  if (data_.size() != shape_size(shape_))
    throw DimensionError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string(shape_));
  require_finite(*this, "tensor construction");
}

Tensor::Tensor(Shape shape, std::initializer_list<double> data)
    : Tensor(std::move(shape), std::vector<double>(data)) {}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_string(shape_));
  return shape_[axis];
}

double Tensor::item() const {
  if (data_.size() != 1)
    throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  check_dims(shape);
  if (shape_size(shape) != data_.size())
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  shape_ = std::move(shape);
  return std::move(*this);
}

bool Tensor::all_finite() const {
  // Exponent-field test as a branch-free OR reduction, so it vectorizes.
  constexpr std::uint64_t kExp = 0x7ff0000000000000ULL;
  std::uint64_t bad = 0;
  for (double v : data_) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & kExp) == kExp);
  return bad == 0;
}

void require_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) throw NumericError("non-finite value in " + what);
}

}  // namespace fpcc
