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

#include "exitpipe/tensor/kernels.h"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace exitpipe::kernels {

void Matmul(std::span<const double> a, std::size_t rows, std::size_t k, std::span<const double> b, std::size_t n,
            bool transpose_b, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  if (transpose_b) {
    for (std::size_t i = 0; i < rows; ++i) {
      const double *ai = a.data() + i * k;
      double *oi = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double *bj = b.data() + j * k;
        double acc = 0.0;
        for (std::size_t t = 0; t < k; ++t) {
          acc += ai[t] * bj[t];
        }
        oi[j] = acc;
      }
    }
    return;
  }
  for (std::size_t i = 0; i < rows; ++i) {
    const double *ai = a.data() + i * k;
    double *oi = out.data() + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = ai[t];
      const double *bt = b.data() + t * n;
      for (std::size_t j = 0; j < n; ++j) {
        oi[j] += av * bt[j];
      }
    }
  }
}

double RmsNormRow(std::span<const double> x, std::span<const double> gain, std::span<double> y) {
  double ss = 0.0;
  for (double v : x) {
    ss += v * v;
  }
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + kRmsNormEps);
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = x[i] * inv * gain[i];
  }
  return inv;
}

double Gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double GeluDerivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

void SoftmaxRow(std::span<const double> x, std::span<double> y) {
  const double m = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - m);
    z += y[i];
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] /= z;
  }
}

double LogSumExp(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (double v : x) {
    z += std::exp(v - m);
  }
  return m + std::log(z);
}

void AttendRow(const double *query, StridedRows keys, StridedRows values, std::size_t len, std::size_t head_dim,
               double *probs, double *out) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  double m = -INFINITY;
  for (std::size_t j = 0; j < len; ++j) {
    const double *kj = keys.base + j * keys.stride;
    double s = 0.0;
    for (std::size_t t = 0; t < head_dim; ++t) {
      s += query[t] * kj[t];
    }
    probs[j] = s * scale;
    m = std::max(m, probs[j]);
  }
  double z = 0.0;
  for (std::size_t j = 0; j < len; ++j) {
    probs[j] = std::exp(probs[j] - m);
    z += probs[j];
  }
  for (std::size_t j = 0; j < len; ++j) {
    probs[j] /= z;
  }
  std::fill(out, out + head_dim, 0.0);
  for (std::size_t j = 0; j < len; ++j) {
    const double *vj = values.base + j * values.stride;
    const double p = probs[j];
    for (std::size_t t = 0; t < head_dim; ++t) {
      out[t] += p * vj[t];
    }
  }
}

}  // namespace exitpipe::kernels
