/**
 * Copyright 2026 The ExitPipe Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef EXITPIPE_TENSOR_TENSOR_H_
#define EXITPIPE_TENSOR_TENSOR_H_

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace exitpipe {

using Shape = std::vector<std::size_t>;

std::size_t NumElements(const Shape &shape);
std::string ShapeToString(const Shape &shape);

// Dense row-major tensor of doubles. Every stored value is finite; constructors
// and mutators that accept external data reject NaN/Inf.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor Zeros(Shape shape, bool requires_grad = false);
  static Tensor Full(Shape shape, double value, bool requires_grad = false);
  static Tensor Scalar(double value);
  static Tensor FromRows(const std::vector<std::vector<double>> &rows);

  const Shape &shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  // Size of the last dimension; tensors are treated as (rows x cols) by the row-wise ops.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  std::span<const double> data() const { return data_; }
  std::span<double> mutable_data() { return data_; }
  const std::vector<double> &values() const { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double at(std::size_t i) const { return data_.at(i); }
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool value) { requires_grad_ = value; }

  const std::optional<std::vector<double>> &grad() const { return grad_; }
  void AccumulateGrad(std::span<const double> g);
  void ZeroGrad() { grad_.reset(); }

  Tensor Reshaped(Shape shape) const;
  void CheckFinite(const char *what) const;

  bool operator==(const Tensor &other) const { return shape_ == other.shape_ && data_ == other.data_; }

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

}  // namespace exitpipe

#endif  // EXITPIPE_TENSOR_TENSOR_H_
