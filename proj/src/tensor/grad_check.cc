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

#include "exitpipe/tensor/grad_check.h"

#include <algorithm>
#include <cmath>

#include "exitpipe/error.h"
#include "exitpipe/tensor/ops.h"

namespace exitpipe {
namespace {

double Evaluate(const ScalarFn &f, const Tensor &x) {
  Tape tape;
  const Var out = f(tape, tape.Constant(x));
  const double v = tape.value(out).item();
  EXITPIPE_CHECK(std::isfinite(v), ErrorKind::kNonFinite, "finite-difference evaluation is not finite");
  return v;
}

Tensor RandomTensor(Shape shape, std::mt19937_64 &rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(NumElements(shape));
  for (double &v : data) {
    v = dist(rng);
  }
  return Tensor(std::move(shape), std::move(data));
}

std::size_t Pick(std::mt19937_64 &rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace

double FiniteDifferenceCheck(const ScalarFn &f, const Tensor &x, double eps) {
  EXITPIPE_CHECK(eps > 0.0 && std::isfinite(eps), ErrorKind::kInvalidArgument, "eps must be positive");
  std::vector<double> analytic;
  {
    Tape tape;
    const Var xv = tape.Leaf("x", x);
    const Var out = f(tape, xv);
    EXITPIPE_CHECK(tape.value(out).numel() == 1, ErrorKind::kShapeMismatch, "gradient check needs a scalar function");
    analytic = tape.Backward(out).at("x");
  }
  std::vector<double> central(x.numel());
  Tensor probe = x;
  double max_analytic = 0.0, max_central = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x[i];
    auto at = [&](double step) {
      probe.mutable_data()[i] = orig + step;
      const double v = Evaluate(f, probe);
      probe.mutable_data()[i] = orig;
      return v;
    };
    central[i] = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
    max_analytic = std::max(max_analytic, std::abs(analytic[i]));
    max_central = std::max(max_central, std::abs(central[i]));
  }
  const double scale = max_analytic + max_central + 1e-12;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    worst = std::max(worst, std::abs(analytic[i] - central[i]) / scale);
  }
  return worst;
}

double RandomOpGradientError(OpKind kind, std::mt19937_64 &rng, double eps) {
  std::vector<Tensor> inputs;
  ops::OpAttrs attrs;
  switch (kind) {
    case OpKind::kMatmul: {
      const std::size_t r = Pick(rng, 1, 3), k = Pick(rng, 1, 4), n = Pick(rng, 1, 4);
      attrs.transpose_b = Pick(rng, 0, 1) == 1;
      inputs.push_back(Pick(rng, 0, 1) ? RandomTensor({2, r, k}, rng) : RandomTensor({r, k}, rng));
      inputs.push_back(attrs.transpose_b ? RandomTensor({n, k}, rng) : RandomTensor({k, n}, rng));
      break;
    }
    case OpKind::kAdd:
    case OpKind::kMul:
    case OpKind::kDot: {
      const Shape shape{Pick(rng, 1, 3), Pick(rng, 1, 5)};
      inputs.push_back(RandomTensor(shape, rng));
      inputs.push_back(RandomTensor(shape, rng));
      break;
    }
    case OpKind::kScale:
      attrs.factor = std::uniform_real_distribution<double>(-2.0, 2.0)(rng);
      inputs.push_back(RandomTensor({Pick(rng, 1, 3), Pick(rng, 1, 5)}, rng));
      break;
    case OpKind::kEmbedding: {
      const std::size_t vocab = Pick(rng, 2, 6);
      inputs.push_back(RandomTensor({vocab, Pick(rng, 1, 4)}, rng));
      attrs.ids_shape = {2, Pick(rng, 1, 4)};
      for (std::size_t i = 0; i < NumElements(attrs.ids_shape); ++i) {
        attrs.ids.push_back(static_cast<int>(Pick(rng, 0, vocab - 1)));
      }
      break;
    }
    case OpKind::kRmsNorm: {
      const std::size_t h = Pick(rng, 2, 6);
      inputs.push_back(RandomTensor({Pick(rng, 1, 3), h}, rng));
      inputs.push_back(RandomTensor({h}, rng, 0.5, 1.5));
      break;
    }
    case OpKind::kSoftmax:
    case OpKind::kGelu:
    case OpKind::kSum:
      inputs.push_back(RandomTensor({Pick(rng, 1, 3), Pick(rng, 1, 5)}, rng, -2.0, 2.0));
      break;
    case OpKind::kCausalAttention: {
      attrs.num_heads = Pick(rng, 1, 2);
      const std::size_t h = attrs.num_heads * Pick(rng, 1, 3);
      inputs.push_back(RandomTensor({Pick(rng, 1, 2), Pick(rng, 1, 4), 3 * h}, rng));
      break;
    }
    case OpKind::kCrossEntropy: {
      const std::size_t rows = Pick(rng, 1, 4), vocab = Pick(rng, 2, 6);
      inputs.push_back(RandomTensor({rows, vocab}, rng, -2.0, 2.0));
      for (std::size_t i = 0; i < rows; ++i) {
        attrs.ids.push_back(static_cast<int>(Pick(rng, 0, vocab - 1)));
      }
      break;
    }
  }

  // Output shape, then a fixed random projection so every output coordinate matters.
  Shape out_shape;
  {
    Tape probe;
    std::vector<Var> vars;
    for (const auto &t : inputs) {
      vars.push_back(probe.Constant(t));
    }
    out_shape = probe.value(ops::Apply(probe, kind, vars, attrs)).shape();
  }
  const Tensor direction = RandomTensor(out_shape, rng);

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const ScalarFn f = [&](Tape &tape, Var x) {
      std::vector<Var> vars;
      for (std::size_t j = 0; j < inputs.size(); ++j) {
        vars.push_back(j == k ? x : tape.Constant(inputs[j]));
      }
      const Var out = ops::Apply(tape, kind, vars, attrs);
      return ops::Dot(tape, out, tape.Constant(direction));
    };
    worst = std::max(worst, FiniteDifferenceCheck(f, inputs[k], eps));
  }
  return worst;
}

}  // namespace exitpipe
