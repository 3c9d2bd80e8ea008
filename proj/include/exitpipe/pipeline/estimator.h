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

#ifndef EXITPIPE_PIPELINE_ESTIMATOR_H_
#define EXITPIPE_PIPELINE_ESTIMATOR_H_

#include <cstddef>
#include <cstdint>

namespace exitpipe {

// Joint law of one sample (a, b): a is the gradient of the early losses, which the filled
// estimator sees once more, b that of the later losses. Bivariate normal.
struct EstimatorSpec {
  double mean_a = 0.0;
  double mean_b = 0.0;
  double var_a = 1.0;
  double var_b = 1.0;
  double cov_ab = 0.0;
};

struct EstimatorStats {
  std::size_t trials = 0;
  std::size_t n = 0;
  double mean = 0.0;  // true value of E[a] + E[b]
  double bias = 0.0;  // of e = mean_N(a) + mean_N(b)
  double bias_se = 0.0;
  double bias_plus = 0.0;  // of e+ = mean_{N+1}(a) + mean_N(b)
  double bias_plus_se = 0.0;
  double var = 0.0;
  double var_plus = 0.0;
  double difference = 0.0;  // var - var_plus, estimated from paired squared errors
  double difference_se = 0.0;
  double predicted_difference = 0.0;  // (var_a + 2 cov_ab) / (N (N + 1))
};

double PredictedVarianceDifference(const EstimatorSpec &spec, std::size_t n);

// Monte Carlo over `trials` draws of N + 1 samples. Throws kInvalidArgument for a degenerate
// spec (non-positive var_a, negative var_b, |cov| beyond the Cauchy-Schwarz bound) or N = 0.
EstimatorStats EstimateStats(const EstimatorSpec &spec, std::size_t trials, std::size_t n, std::uint64_t seed);

}  // namespace exitpipe

#endif  // EXITPIPE_PIPELINE_ESTIMATOR_H_
