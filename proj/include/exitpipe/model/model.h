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

#ifndef EXITPIPE_MODEL_MODEL_H_
#define EXITPIPE_MODEL_MODEL_H_

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "exitpipe/model/config.h"
#include "exitpipe/tensor/tape.h"

namespace exitpipe {

using ParameterMap = std::map<std::string, Tensor>;

struct EarlyExitModel {
  ModelConfig config;
  ParameterMap params;
};

struct ParamInfo {
  std::string name;
  Shape shape;
  enum class Init { kNormal, kResidualOut, kOnes } init;
};

// Every parameter of the model in canonical order. With tied embeddings the heads have
// no output matrix of their own and use "embed.tokens".
std::vector<ParamInfo> EnumerateParameters(const ModelConfig &config);

// Deterministic initialization. Each parameter draws from a generator seeded by (seed, name),
// so a parameter's initial value does not depend on which other parameters exist.
EarlyExitModel BuildModel(const ModelConfig &config, std::uint64_t seed);

// Scalar count by enumerating the model's tensors.
std::size_t CountParameters(const EarlyExitModel &model);
// Scalar count from the closed-form per-component sizes.
std::size_t ParameterCountFormula(const ModelConfig &config);

std::string LayerPrefix(std::size_t layer);
std::string ExitPrefix(std::size_t exit);
// Name of the output embedding used by exit j (j == exits.size() is the final head).
std::string OutputEmbeddingName(const ModelConfig &config, std::size_t exit);
inline constexpr const char *kTokenEmbedding = "embed.tokens";
inline constexpr const char *kPositionEmbedding = "embed.positions";

// Next-token training batch: targets[i] is the token following inputs[i].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> inputs;
  std::vector<int> targets;
};

// Maps a parameter name to its Var on a tape.
using ParamLookup = std::function<Var(const std::string &)>;
// Registers parameters from the map as named leaves on first use.
ParamLookup LeafLookup(Tape &tape, const ParameterMap &params);

// Building blocks shared by the single-device model and the pipeline stages.
namespace graph {

// Token plus position embedding -> x_0 of shape [batch, seq, h].
Var Embed(Tape &tape, const ParamLookup &p, const ModelConfig &config, std::span<const int> tokens, std::size_t batch,
          std::size_t seq);
// Pre-norm transformer layer whose parameters are named prefix + {norm1, attn.qkv, ...}.
Var Layer(Tape &tape, const ParamLookup &p, const std::string &prefix, Var x, std::size_t num_heads);
// Logits [batch, seq, V] of exit j (j == exits.size() is the final head) reading x.
Var Head(Tape &tape, const ParamLookup &p, const ModelConfig &config, std::size_t exit, Var x);
// sum_j weights[j] * losses[j] folded left to right.
Var WeightedSum(Tape &tape, std::span<const Var> losses, std::span<const double> weights);

}  // namespace graph

// Records the whole model: all layers, then every head in depth order, then
// scale * sum_j w_j * CE_j. Returns the total and the per-exit losses.
struct LossVars {
  Var total;
  std::vector<Var> exit_losses;
};
LossVars RecordWeightedLoss(Tape &tape, const ParamLookup &p, const ModelConfig &config, const TokenBatch &batch,
                            std::span<const double> weights, double scale = 1.0);

// Logits at every exit ordered by depth, final last. Each has shape [batch, seq, V].
std::vector<Tensor> ForwardAllExits(const EarlyExitModel &model, std::span<const int> tokens, std::size_t batch,
                                    std::size_t seq);

struct WeightedLossResult {
  double loss = 0.0;
  std::vector<double> exit_losses;
};
WeightedLossResult WeightedLoss(const EarlyExitModel &model, const TokenBatch &batch, std::span<const double> weights);

// Loss and gradients of the weighted loss, accumulated over microbatches in order with
// each microbatch scaled by 1 / batches.size(). This is the single-device reference.
struct GradientResult {
  std::vector<double> exit_losses;  // mean over microbatches
  GradientMap grads;
};
GradientResult SingleDeviceGradients(const EarlyExitModel &model, std::span<const TokenBatch> batches,
                                     std::span<const double> weights);

void CheckBatch(const ModelConfig &config, const TokenBatch &batch);

}  // namespace exitpipe

#endif  // EXITPIPE_MODEL_MODEL_H_
