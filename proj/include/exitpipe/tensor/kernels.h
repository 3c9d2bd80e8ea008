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

#ifndef EXITPIPE_TENSOR_KERNELS_H_
#define EXITPIPE_TENSOR_KERNELS_H_

#include <cstddef>
#include <span>

// Row-level numeric kernels. The autodiff ops and the KV-cached inference path
// both call these, so a row computed in a batch is bitwise identical to the same
// row computed alone.
namespace exitpipe::kernels {

constexpr double kRmsNormEps = 1e-6;

// out[rows x n] = a[rows x k] * B, where B is [k x n], or [n x k] when transpose_b.
void Matmul(std::span<const double> a, std::size_t rows, std::size_t k, std::span<const double> b, std::size_t n,
            bool transpose_b, std::span<double> out);

// y = x / sqrt(mean(x^2) + eps) * gain. Returns the inverse rms.
double RmsNormRow(std::span<const double> x, std::span<const double> gain, std::span<double> y);

double Gelu(double x);
double GeluDerivative(double x);

void SoftmaxRow(std::span<const double> x, std::span<double> y);

// log(sum(exp(x))) computed stably.
double LogSumExp(std::span<const double> x);

struct StridedRows {
  const double *base;
  std::size_t stride;
};

// Causal attention for one query and one head over keys/values [0, len).
// probs receives the attention weights (length len); out the weighted value sum (length head_dim).
void AttendRow(const double *query, StridedRows keys, StridedRows values, std::size_t len, std::size_t head_dim,
               double *probs, double *out);

}  // namespace exitpipe::kernels

#endif  // EXITPIPE_TENSOR_KERNELS_H_
