// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace gmldm {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

// Dense float32 tensor, contiguous row-major (last dimension fastest).
// Copying a Tensor shares storage; clone() deep-copies. Reductions that
// feed losses accumulate in double.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, float v);
  static Tensor from(Shape shape, std::vector<float> values);
  static Tensor scalar(float v) { return full({1}, v); }

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return numel_; }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  bool defined() const { return storage_ != nullptr; }

  float* data() { return storage_->data(); }
  const float* data() const { return storage_->data(); }
  float& operator[](int64_t i) { return (*storage_)[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const {
    return (*storage_)[static_cast<size_t>(i)];
  }

  // Shares storage; total element count must match.
  Tensor reshaped(Shape shape) const;
  Tensor clone() const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  double sum_double() const;
  float min_value() const;
  float max_value() const;

  void fill(float v);

 private:
  std::shared_ptr<std::vector<float>> storage_;
  Shape shape_;
  int64_t numel_ = 0;
};

}  // namespace gmldm
