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

#ifndef EXITPIPE_TENSOR_OPS_H_
#define EXITPIPE_TENSOR_OPS_H_

#include <span>
#include <vector>

#include "exitpipe/tensor/tape.h"

// Differentiable operations. Row-wise ops treat a tensor as (numel / last_dim) rows of
// last_dim columns, so hidden states of shape [batch, seq, h] need no reshaping.
namespace exitpipe::ops {

// [..., k] x [k, n] -> [..., n]; with transpose_b the right operand is [n, k].
Var Matmul(Tape &tape, Var a, Var b, bool transpose_b = false);
Var Add(Tape &tape, Var a, Var b);
Var Scale(Tape &tape, Var a, double factor);
// table [V, h] gathered at ids (shape ids_shape) -> ids_shape + [h].
Var Embedding(Tape &tape, Var table, std::span<const int> ids, const Shape &ids_shape);
Var RmsNorm(Tape &tape, Var x, Var gain);
Var Softmax(Tape &tape, Var x);
Var Gelu(Tape &tape, Var x);
// qkv [batch, seq, 3h] laid out as [q | k | v] -> [batch, seq, h], causal mask per sequence.
Var CausalAttention(Tape &tape, Var qkv, std::size_t num_heads);
// Mean negative log-likelihood over rows of logits [..., V].
Var CrossEntropy(Tape &tape, Var logits, std::span<const int> targets);
Var Mul(Tape &tape, Var a, Var b);
Var Sum(Tape &tape, Var a);
// <a, b> = sum of the entrywise product.
Var Dot(Tape &tape, Var a, Var b);

struct OpAttrs {
  bool transpose_b = false;
  double factor = 1.0;
  std::vector<int> ids;
  Shape ids_shape;
  std::size_t num_heads = 1;
};

// Generic dispatch used by the gradient-check harness.
Var Apply(Tape &tape, OpKind kind, std::span<const Var> inputs, const OpAttrs &attrs);

}  // namespace exitpipe::ops

#endif  // EXITPIPE_TENSOR_OPS_H_
