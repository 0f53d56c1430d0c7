// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#include "gmldm/tensor.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "gmldm/errors.hpp"

namespace gmldm {

int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d <= 0) return 0;
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  numel_ = numel_of(shape_);
  if (numel_ <= 0)
    throw ValidationError("Tensor: non-positive shape " + shape_str(shape_));
  storage_ = std::make_shared<std::vector<float>>(
      static_cast<size_t>(numel_), 0.0f);
}

Tensor Tensor::full(Shape shape, float v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<float> values) {
  if (numel_of(shape) != static_cast<int64_t>(values.size()))
    throw ValidationError("Tensor::from: " + shape_str(shape) +
                          " does not hold " + std::to_string(values.size()) +
                          " values");
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = static_cast<int64_t>(values.size());
  t.storage_ = std::make_shared<std::vector<float>>(std::move(values));
  return t;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel_of(shape) != numel_)
    throw ValidationError("reshape " + shape_str(shape_) + " -> " +
                          shape_str(shape) + ": element count differs");
  Tensor t;
  t.storage_ = storage_;
  t.shape_ = std::move(shape);
  t.numel_ = numel_;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.storage_ = std::make_shared<std::vector<float>>(*storage_);
  t.shape_ = shape_;
  t.numel_ = numel_;
  return t;
}

bool Tensor::all_finite() const {
  for (float v : *storage_)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::sum_double() const {
  double s = 0.0;
  for (float v : *storage_) s += v;
  return s;
}

float Tensor::min_value() const {
  float m = std::numeric_limits<float>::infinity();
  for (float v : *storage_) m = std::min(m, v);
  return m;
}

float Tensor::max_value() const {
  float m = -std::numeric_limits<float>::infinity();
  for (float v : *storage_) m = std::max(m, v);
  return m;
}

void Tensor::fill(float v) {
  for (float& x : *storage_) x = v;
}

}  // namespace gmldm
