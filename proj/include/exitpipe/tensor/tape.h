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

#ifndef EXITPIPE_TENSOR_TAPE_H_
#define EXITPIPE_TENSOR_TAPE_H_

#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "exitpipe/tensor/tensor.h"

namespace exitpipe {

enum class OpKind {
  kMatmul,
  kAdd,
  kScale,
  kEmbedding,
  kRmsNorm,
  kSoftmax,
  kGelu,
  kCausalAttention,
  kCrossEntropy,
  // Reductions used to build losses, including the <g, x> term of the auxiliary loss.
  kMul,
  kSum,
  kDot,
};

const char *OpKindName(OpKind kind);

// Handle to a value recorded on a Tape. Only meaningful for the tape that issued it.
struct Var {
  static constexpr std::size_t kInvalid = std::numeric_limits<std::size_t>::max();
  std::size_t id = kInvalid;

  bool valid() const { return id != kInvalid; }
  bool operator==(const Var &) const = default;
};

// Gradient of a scalar loss with respect to named leaves.
using GradientMap = std::map<std::string, std::vector<double>>;

class Tape;

class BackwardContext {
 public:
  BackwardContext(const Tape &tape, std::span<const double> grad_out, std::vector<std::vector<double> *> grad_in)
      : tape_(tape), grad_out_(grad_out), grad_in_(std::move(grad_in)) {}

  std::span<const double> grad_out() const { return grad_out_; }
  // Accumulator for the k-th input, or nullptr if that input needs no gradient.
  std::vector<double> *grad_in(std::size_t k) const { return grad_in_[k]; }
  const Tensor &value(Var v) const;

 private:
  const Tape &tape_;
  std::span<const double> grad_out_;
  std::vector<std::vector<double> *> grad_in_;
};

// Single-use record of the operations of one forward pass. Nodes are appended in
// execution order, so inputs always precede the node that consumes them.
class Tape {
 public:
  using BackwardFn = std::function<void(const BackwardContext &)>;

  struct Node {
    OpKind kind;
    std::vector<Var> inputs;
    Var output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;
  Tape(Tape &&) = default;
  Tape &operator=(Tape &&) = default;

  Var Constant(Tensor value);
  // Registers a named gradient leaf. Registering the same name twice returns the same Var,
  // so a tied parameter used in several places accumulates into one gradient.
  Var Leaf(const std::string &name, const Tensor &value);
  std::optional<Var> FindLeaf(const std::string &name) const;

  // Records op output. A node is kept only if some input requires gradient.
  Var Record(OpKind kind, std::vector<Var> inputs, Tensor output, BackwardFn backward);

  const Tensor &value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_values() const { return values_.size(); }
  const std::vector<Node> &nodes() const { return nodes_; }
  bool consumed() const { return consumed_; }

  // Reverse sweep from a scalar loss. Every leaf receives its total derivative;
  // leaves not connected to the loss receive zeros. The tape cannot be reused afterwards.
  GradientMap Backward(Var loss);

 private:
  void CheckUsable() const;

  std::vector<Tensor> values_;
  std::vector<bool> requires_grad_;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, Var>> leaves_;
  std::unordered_map<std::string, std::size_t> leaf_index_;
  bool consumed_ = false;
};

}  // namespace exitpipe

#endif  // EXITPIPE_TENSOR_TAPE_H_
