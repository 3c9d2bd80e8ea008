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

#include "exitpipe/tensor/tensor.h"

#include <cmath>
#include <sstream>
#include <utility>

#include "exitpipe/error.h"

namespace exitpipe {

const char *ErrorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShapeMismatch:
      return "shape mismatch";
    case ErrorKind::kNonFinite:
      return "non-finite value";
    case ErrorKind::kInvalidToken:
      return "invalid token";
    case ErrorKind::kInvalidArgument:
      return "invalid argument";
    case ErrorKind::kInvalidConfig:
      return "invalid config";
    case ErrorKind::kTapeConsumed:
      return "tape consumed";
    case ErrorKind::kProtocolViolation:
      return "protocol violation";
    case ErrorKind::kContextOverflow:
      return "context overflow";
    case ErrorKind::kParse:
      return "parse error";
    case ErrorKind::kIo:
      return "io error";
    case ErrorKind::kInternal:
      return "internal error";
  }
  return "error";
}

std::size_t NumElements(const Shape &shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    n *= d;
  }
  return n;
}

std::string ShapeToString(const Shape &shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
  for (auto d : shape_) {
    EXITPIPE_CHECK(d > 0, ErrorKind::kShapeMismatch, "dimension sizes must be positive, got " + ShapeToString(shape_));
  }
  EXITPIPE_CHECK(NumElements(shape_) == data_.size(), ErrorKind::kShapeMismatch,
                 "shape " + ShapeToString(shape_) + " does not match " + std::to_string(data_.size()) + " values");
  CheckFinite("tensor data");
}

Tensor Tensor::Zeros(Shape shape, bool requires_grad) { return Full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::Full(Shape shape, double value, bool requires_grad) {
  auto n = NumElements(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::Scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::FromRows(const std::vector<std::vector<double>> &rows) {
  EXITPIPE_CHECK(!rows.empty() && !rows.front().empty(), ErrorKind::kShapeMismatch, "empty rows");
  std::vector<double> data;
  for (const auto &row : rows) {
    EXITPIPE_CHECK(row.size() == rows.front().size(), ErrorKind::kShapeMismatch, "ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({rows.size(), rows.front().size()}, std::move(data));
}

double Tensor::item() const {
  EXITPIPE_CHECK(data_.size() == 1, ErrorKind::kShapeMismatch, "item() on tensor of shape " + ShapeToString(shape_));
  return data_[0];
}

void Tensor::AccumulateGrad(std::span<const double> g) {
  EXITPIPE_CHECK(g.size() == data_.size(), ErrorKind::kShapeMismatch, "gradient size does not match tensor");
  if (!grad_) {
    grad_.emplace(data_.size(), 0.0);
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    (*grad_)[i] += g[i];
  }
}

Tensor Tensor::Reshaped(Shape shape) const {
  EXITPIPE_CHECK(NumElements(shape) == data_.size(), ErrorKind::kShapeMismatch,
                 "cannot reshape " + ShapeToString(shape_) + " to " + ShapeToString(shape));
  Tensor out(std::move(shape), data_, requires_grad_);
  return out;
}

void Tensor::CheckFinite(const char *what) const {
  for (double v : data_) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::kNonFinite, std::string(what) + " contains NaN or Inf");
    }
  }
}

}  // namespace exitpipe
