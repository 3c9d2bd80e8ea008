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

#ifndef EXITPIPE_PIPELINE_STAGE_H_
#define EXITPIPE_PIPELINE_STAGE_H_

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "exitpipe/model/model.h"
#include "exitpipe/model/partition.h"
#include "exitpipe/schedule/simulator.h"
#include "exitpipe/tensor/tape.h"

namespace exitpipe {

// Name of the tape leaf that holds the received activation x_{i-1}.
inline constexpr const char *kInputLeaf = "@input";

struct StageForward {
  Var output;             // x_i, sent to the next stage
  std::vector<Var> taps;  // hidden state read by each local exit
};

// The computation of one pipeline stage. Implementations are immutable and shared by the
// stage worker for the whole iteration; samples are addressed by schedule microbatch id.
class StageProgram {
 public:
  virtual ~StageProgram() = default;

  // Local exits in depth order (a final head comes last).
  virtual std::size_t num_exits() const = 0;
  // Global index of local exit k, used to look up its loss weight.
  virtual std::size_t exit_index(std::size_t k) const = 0;
  // Records the backbone of the stage. input is invalid on the first stage.
  virtual StageForward Forward(Tape &tape, const ParamLookup &p, std::size_t sample, Var input) const = 0;
  // Output of local exit k (logits for a language model).
  virtual Var Head(Tape &tape, const ParamLookup &p, std::size_t k, Var tap) const = 0;
  virtual Var Loss(Tape &tape, std::size_t sample, std::size_t k, Var head_output) const = 0;
  // Stored backbone activations per in-flight microbatch, in memory units.
  virtual double ActivationUnits() const = 0;
};

// One stage of the early-exit transformer.
class TransformerStage : public StageProgram {
 public:
  // samples[id] is the microbatch with schedule id `id`; the span must outlive the stage.
  TransformerStage(const ModelConfig &config, const StageLayout &layout, std::span<const TokenBatch> samples);

  std::size_t num_exits() const override { return layout_.exits.size(); }
  std::size_t exit_index(std::size_t k) const override { return layout_.exits.at(k); }
  StageForward Forward(Tape &tape, const ParamLookup &p, std::size_t sample, Var input) const override;
  Var Head(Tape &tape, const ParamLookup &p, std::size_t k, Var tap) const override;
  Var Loss(Tape &tape, std::size_t sample, std::size_t k, Var head_output) const override;
  double ActivationUnits() const override;

 private:
  const TokenBatch &sample(std::size_t id) const;

  ModelConfig config_;
  StageLayout layout_;
  std::span<const TokenBatch> samples_;
};

// Memory model of one microbatch of the given shape on a stage of layers_per_stage layers.
MemoryModel TransformerMemoryModel(const ModelConfig &config, std::size_t microbatch, std::size_t seq,
                                   std::size_t layers_per_stage);

// L_i + <g_i, x_i>. local is invalid for a stage without exits; received_gradient is null on
// the stage that ends the backward pass of this microbatch. g_i enters as a constant.
Var AuxiliaryLoss(Tape &tape, Var local, Var sent_activation, const Tensor *received_gradient);

struct StageGradients {
  GradientMap owned;
  GradientMap replicas;  // tied copies; summed into the owning stage's entry
};

// Sums the replica gradients of tied parameters into their owner, in stage order.
GradientMap SyncTied(const std::vector<StageGradients> &stages);

}  // namespace exitpipe

#endif  // EXITPIPE_PIPELINE_STAGE_H_
