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

#ifndef EXITPIPE_TENSOR_GRAD_CHECK_H_
#define EXITPIPE_TENSOR_GRAD_CHECK_H_

#include <cstdint>
#include <functional>
#include <random>

#include "exitpipe/tensor/tape.h"

namespace exitpipe {

// Builds a scalar from x on the given tape. Must be deterministic.
using ScalarFn = std::function<Var(Tape &, Var)>;

// Max over coordinates of |analytic_i - central_i| / (max_j |analytic_j| + max_j |central_j|),
// where central_i is the fourth-order central difference with step eps,
// (8 (f(x + eps e_i) - f(x - eps e_i)) - (f(x + 2 eps e_i) - f(x - 2 eps e_i))) / (12 eps). Scaling by the gradient's
// magnitude keeps coordinates where the derivative vanishes from measuring only the round-off
// of the difference quotient. Throws kNonFinite if any evaluation produces a non-finite value.
double FiniteDifferenceCheck(const ScalarFn &f, const Tensor &x, double eps);

// One randomized trial for an op kind: draws small random inputs and attributes, projects
// the output onto a random direction and checks every differentiable input in turn.
// Returns the worst relative error over all inputs.
double RandomOpGradientError(OpKind kind, std::mt19937_64 &rng, double eps = 1e-5);

inline constexpr OpKind kAllOpKinds[] = {
    OpKind::kMatmul, OpKind::kAdd,  OpKind::kScale,           OpKind::kEmbedding,    OpKind::kRmsNorm, OpKind::kSoftmax,
    OpKind::kGelu,   OpKind::kCausalAttention, OpKind::kCrossEntropy, OpKind::kMul, OpKind::kSum,     OpKind::kDot,
};

}  // namespace exitpipe

#endif  // EXITPIPE_TENSOR_GRAD_CHECK_H_
