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

#ifndef EXITPIPE_PIPELINE_ENGINE_H_
#define EXITPIPE_PIPELINE_ENGINE_H_

#include <chrono>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "exitpipe/model/model.h"
#include "exitpipe/pipeline/stage.h"
#include "exitpipe/pipeline/worker_pool.h"
#include "exitpipe/schedule/plan.h"
#include "exitpipe/schedule/simulator.h"
#include "exitpipe/tensor/tape.h"

namespace exitpipe {

struct ActivationMessage {
  std::size_t microbatch = 0;
  Tensor hidden;
};

struct GradientMessage {
  std::size_t microbatch = 0;
  Tensor gradient;
};

// Exit-head work postponed from a forward step to the matching backward step. Each entry
// runs at most once.
class DeferredExits {
 public:
  using Closure = std::function<std::vector<Var>()>;

  // Throws kProtocolViolation if the microbatch already has a pending closure.
  void Defer(std::size_t microbatch, Closure closure);
  // Runs and removes the closure. Throws kProtocolViolation if there is none, including
  // when it was already taken.
  std::vector<Var> Run(std::size_t microbatch);
  std::size_t pending() const { return closures_.size(); }

 private:
  std::map<std::size_t, Closure> closures_;
};

// Rescaling that keeps the accumulated gradient unbiased when fill microbatches are present.
struct FillScaling {
  // Loss-weight factor B / (B + m_j) for regular and Part 1 microbatches, where m_j counts
  // the Part 1 microbatches that reach exit j.
  std::vector<double> exit_factor;
  // Gradient factor B / (B + n_r) per stage, where n_r counts the Part 2 microbatches whose
  // backward pass covers stage r.
  std::vector<double> stage_factor;
  std::vector<std::size_t> part1_visits;
  std::vector<std::size_t> part2_cover;
};

// stage_exits[r] lists the global exit indices evaluated on stage r.
FillScaling ComputeFillScaling(const PipelineSchedule &schedule, const std::vector<std::vector<std::size_t>> &stage_exits,
                               std::size_t num_exits);

struct StageSetup {
  const StageProgram *program = nullptr;
  ParameterMap params;                // owned parameters and tied replicas
  std::vector<std::string> replicas;  // names in params that are replicas of another stage's parameter
};

// Builds the stage setups of a partitioned model. programs[r] serves stage r.
std::vector<StageSetup> MakeStageSetups(const EarlyExitModel &model, const StagePartition &partition,
                                        const std::vector<const StageProgram *> &programs);

struct IterationOptions {
  bool defer_exit_forward = false;
  std::vector<double> weights;  // per global exit, final last
  bool rescale_fill = true;
  // Multiplies the gradient factor of stages covered by Part 2 microbatches. Only a fault
  // injection for negative tests; any value but 1 biases the gradient.
  double stage_factor_bias = 1.0;
  bool keep_microbatch_grads = false;
  std::chrono::milliseconds message_timeout{30000};
};

struct TrainStepReport {
  std::vector<double> exit_losses;       // mean over the regular microbatches
  std::vector<double> stage_grad_norms;  // L2 norm of each stage's scaled gradients, replicas included
  std::vector<double> forward_seconds;   // per stage
  std::vector<double> backward_seconds;  // per stage
  double wall_seconds = 0.0;
  std::vector<double> peak_activation;  // memory units, same accounting as the simulator
  std::vector<std::size_t> peak_in_flight;
  std::size_t regular_microbatches = 0;
  std::size_t part1_microbatches = 0;
  std::size_t part2_microbatches = 0;
};

struct IterationResult {
  GradientMap grads;  // merged over stages, tied parameters summed
  TrainStepReport report;
  ExecutionTrace trace;
  // Per stage, per microbatch id: unscaled gradients, filled with keep_microbatch_grads.
  std::vector<std::map<std::size_t, GradientMap>> microbatch_grads;
};

// Runs 1F1B iterations on one long-lived worker per stage. Stage r talks to r - 1 and r + 1
// only through two ordered queues.
class PipelineEngine {
 public:
  explicit PipelineEngine(std::size_t num_stages);

  std::size_t num_stages() const { return pool_.size(); }

  // Executes the schedule. Throws kProtocolViolation when a message arrives out of order
  // or a backward step has no stored activation, kNonFinite on a non-finite loss, and
  // kInvalidConfig for fill microbatches with tied parameters.
  IterationResult Run(const std::vector<StageSetup> &stages, const PipelineSchedule &schedule,
                      const IterationOptions &options);

 private:
  WorkerPool pool_;
};

}  // namespace exitpipe

#endif  // EXITPIPE_PIPELINE_ENGINE_H_
