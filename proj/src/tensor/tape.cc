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

#include "exitpipe/tensor/tape.h"

#include <cmath>
#include <utility>

#include "exitpipe/error.h"

namespace exitpipe {

const char *OpKindName(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul:
      return "matmul";
    case OpKind::kAdd:
      return "add";
    case OpKind::kScale:
      return "scale";
    case OpKind::kEmbedding:
      return "embedding-lookup";
    case OpKind::kRmsNorm:
      return "rmsnorm";
    case OpKind::kSoftmax:
      return "softmax";
    case OpKind::kGelu:
      return "gelu";
    case OpKind::kCausalAttention:
      return "causal-attention";
    case OpKind::kCrossEntropy:
      return "cross-entropy";
    case OpKind::kMul:
      return "mul";
    case OpKind::kSum:
      return "sum";
    case OpKind::kDot:
      return "dot";
  }
  return "unknown";
}

const Tensor &BackwardContext::value(Var v) const { return tape_.value(v); }

void Tape::CheckUsable() const {
  EXITPIPE_CHECK(!consumed_, ErrorKind::kTapeConsumed, "tape already consumed by backward");
}

Var Tape::Constant(Tensor value) {
  CheckUsable();
  value.set_requires_grad(false);
  values_.push_back(std::move(value));
  requires_grad_.push_back(false);
  return Var{values_.size() - 1};
}

Var Tape::Leaf(const std::string &name, const Tensor &value) {
  CheckUsable();
  if (auto it = leaf_index_.find(name); it != leaf_index_.end()) {
    const Var existing = leaves_[it->second].second;
    EXITPIPE_CHECK(values_[existing.id].shape() == value.shape(), ErrorKind::kShapeMismatch,
                   "leaf '" + name + "' registered twice with different shapes");
    return existing;
  }
  values_.push_back(value);
  values_.back().set_requires_grad(true);
  values_.back().ZeroGrad();
  requires_grad_.push_back(true);
  Var v{values_.size() - 1};
  leaf_index_.emplace(name, leaves_.size());
  leaves_.emplace_back(name, v);
  return v;
}

std::optional<Var> Tape::FindLeaf(const std::string &name) const {
  if (auto it = leaf_index_.find(name); it != leaf_index_.end()) {
    return leaves_[it->second].second;
  }
  return std::nullopt;
}

Var Tape::Record(OpKind kind, std::vector<Var> inputs, Tensor output, BackwardFn backward) {
  CheckUsable();
  output.CheckFinite(OpKindName(kind));
  bool any = false;
  for (const auto &in : inputs) {
    EXITPIPE_CHECK(in.valid() && in.id < values_.size(), ErrorKind::kInvalidArgument, "input Var not on this tape");
    any = any || requires_grad_[in.id];
  }
  output.set_requires_grad(any);
  values_.push_back(std::move(output));
  requires_grad_.push_back(any);
  Var out{values_.size() - 1};
  if (any) {
    nodes_.push_back(Node{kind, std::move(inputs), out, std::move(backward)});
  }
  return out;
}

const Tensor &Tape::value(Var v) const {
  EXITPIPE_CHECK(v.valid() && v.id < values_.size(), ErrorKind::kInvalidArgument, "Var not on this tape");
  return values_[v.id];
}

bool Tape::requires_grad(Var v) const {
  EXITPIPE_CHECK(v.valid() && v.id < values_.size(), ErrorKind::kInvalidArgument, "Var not on this tape");
  return requires_grad_[v.id];
}

GradientMap Tape::Backward(Var loss) {
  CheckUsable();
  const Tensor &lv = value(loss);
  EXITPIPE_CHECK(lv.numel() == 1, ErrorKind::kShapeMismatch,
                 "backward requires a scalar loss, got shape " + ShapeToString(lv.shape()));
  consumed_ = true;

  std::vector<std::optional<std::vector<double>>> grads(values_.size());
  if (requires_grad_[loss.id]) {
    grads[loss.id].emplace(1, 1.0);
  }
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const Node &node = *it;
    if (!grads[node.output.id]) {
      continue;
    }
    std::vector<std::vector<double> *> grad_in(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const Var in = node.inputs[k];
      if (!requires_grad_[in.id]) {
        continue;
      }
      if (!grads[in.id]) {
        grads[in.id].emplace(values_[in.id].numel(), 0.0);
      }
      grad_in[k] = &*grads[in.id];
    }
    BackwardContext ctx(*this, *grads[node.output.id], std::move(grad_in));
    node.backward(ctx);
    // Intermediate gradients are dead once propagated.
    grads[node.output.id].reset();
  }

  GradientMap out;
  for (const auto &[name, v] : leaves_) {
    auto &g = grads[v.id];
    std::vector<double> values = g ? std::move(*g) : std::vector<double>(values_[v.id].numel(), 0.0);
    for (double x : values) {
      EXITPIPE_CHECK(std::isfinite(x), ErrorKind::kNonFinite, "gradient of '" + name + "' is not finite");
    }
    out.emplace(name, std::move(values));
  }
  return out;
}

}  // namespace exitpipe
