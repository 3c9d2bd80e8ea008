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

#include "exitpipe/pipeline/estimator.h"

#include <cmath>
#include <random>

#include "exitpipe/error.h"

namespace exitpipe {
namespace {

struct Running {
  double n = 0, sum = 0, sum_sq = 0;
  void Add(double x) {
    n += 1;
    sum += x;
    sum_sq += x * x;
  }
  double mean() const { return sum / n; }
  double var() const { return (sum_sq - sum * sum / n) / (n - 1); }
  double se() const { return std::sqrt(var() / n); }
};

}  // namespace

double PredictedVarianceDifference(const EstimatorSpec &spec, std::size_t n) {
  const double nn = static_cast<double>(n);
  return (spec.var_a + 2.0 * spec.cov_ab) / (nn * (nn + 1.0));
}

EstimatorStats EstimateStats(const EstimatorSpec &spec, std::size_t trials, std::size_t n, std::uint64_t seed) {
  EXITPIPE_CHECK(n >= 1 && trials >= 2, ErrorKind::kInvalidArgument, "need N >= 1 and at least two trials");
  EXITPIPE_CHECK(spec.var_a > 0.0 && spec.var_b >= 0.0, ErrorKind::kInvalidArgument,
                 "variances must be positive for a and non-negative for b");
  EXITPIPE_CHECK(spec.cov_ab * spec.cov_ab <= spec.var_a * spec.var_b * (1.0 + 1e-12), ErrorKind::kInvalidArgument,
                 "covariance exceeds the Cauchy-Schwarz bound");
  // b = mean_b + rho_part * z1 + rest * z2 shares z1 with a.
  const double sa = std::sqrt(spec.var_a);
  const double k = spec.cov_ab / sa;
  const double rest = std::sqrt(std::max(0.0, spec.var_b - k * k));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;

  EstimatorStats out;
  out.trials = trials;
  out.n = n;
  out.mean = spec.mean_a + spec.mean_b;
  out.predicted_difference = PredictedVarianceDifference(spec, n);
  Running e, e_plus, diff;
  const double nn = static_cast<double>(n);
  for (std::size_t t = 0; t < trials; ++t) {
    double sum_a = 0.0, sum_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double z1 = normal(rng), z2 = normal(rng);
      sum_a += spec.mean_a + sa * z1;
      sum_b += spec.mean_b + k * z1 + rest * z2;
    }
    // The extra sample: only its a part is used.
    const double extra_a = spec.mean_a + sa * normal(rng);
    const double est = sum_a / nn + sum_b / nn;
    const double est_plus = (sum_a + extra_a) / (nn + 1.0) + sum_b / nn;
    e.Add(est);
    e_plus.Add(est_plus);
    const double d = est - out.mean, dp = est_plus - out.mean;
    diff.Add(d * d - dp * dp);
  }
  out.bias = e.mean() - out.mean;
  out.bias_se = e.se();
  out.bias_plus = e_plus.mean() - out.mean;
  out.bias_plus_se = e_plus.se();
  out.var = e.var();
  out.var_plus = e_plus.var();
  out.difference = diff.mean();
  out.difference_se = diff.se();
  return out;
}

}  // namespace exitpipe
