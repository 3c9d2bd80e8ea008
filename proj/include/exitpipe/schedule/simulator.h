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

#ifndef EXITPIPE_SCHEDULE_SIMULATOR_H_
#define EXITPIPE_SCHEDULE_SIMULATOR_H_

#include <cstddef>
#include <string>
#include <vector>

#include "exitpipe/schedule/plan.h"

namespace exitpipe {

// Activation memory in abstract float units.
struct MemoryModel {
  std::size_t seq_len = 64;
  std::size_t microbatch = 2;
  std::size_t vocab = 256;
  std::size_t hidden = 64;
  std::size_t layers_per_stage = 2;
  // Stored activations of one transformer layer for one microbatch, in units of s * b * h.
  double layer_activation_coeff = 34.0;

  double StageActivationUnits() const {
    return layer_activation_coeff * static_cast<double>(seq_len * microbatch * hidden * layers_per_stage);
  }
  // Logits of one exit head for one microbatch: s * b * V.
  double LogitUnits() const { return static_cast<double>(seq_len * microbatch * vocab); }
};

enum class ExitMode {
  kStandard,           // no early exits; the final head runs in the forward step
  kEager,              // exit heads run in the forward step, logits kept until backward
  kDeferred,           // exit heads run inside the matching backward step
  kDeferredReordered,  // deferred, with cool-down exit forwards moved ahead of the gradient wait
};

const char *ExitModeName(ExitMode mode);
ExitMode ParseExitMode(const std::string &name);

struct CostModel {
  std::size_t num_stages = 4;
  std::size_t num_microbatches = 6;
  double f = 2.0;     // backbone forward per stage per microbatch
  double b = 4.0;     // backbone backward
  double f_ee = 1.0;  // one exit head forward
  double b_ee = 2.0;  // one exit head backward
  double embed_forward = 0.0;  // extra forward time on the first stage
  double hop_latency = 0.0;    // per point-to-point transfer
  // Early exits per stage (size num_stages, or empty for none). The final head on the
  // last stage is always present and not counted here.
  std::vector<std::size_t> early_exits;
  MemoryModel memory;
  // Parameter memory per stage (size num_stages, or empty for zero).
  std::vector<double> param_units;

  // Four stages, six microbatches, forward:backward = 1:2, backbone:exit forward = 2:1.
  static CostModel ReferencePreset();

  void Validate() const;
  // Heads evaluated on stage r (early exits plus the final head on the last stage).
  std::size_t heads_on(std::size_t stage, ExitMode mode) const;
  // Early exits on stages 0..P-2, the ones that add to the critical path.
  std::size_t non_last_exits() const;
};

struct Event {
  std::size_t stage;
  ActionKind kind;
  std::size_t mb;
  double start;
  double end;
};

struct Timeline {
  std::size_t num_stages = 0;
  ExitMode mode = ExitMode::kStandard;
  PipelineSchedule schedule;
  std::vector<std::vector<Event>> events;  // per stage, in execution order
  double span = 0.0;
  std::vector<double> busy;
  std::vector<double> peak_activation;    // backbone activations plus exit logits
  std::vector<double> peak_exit_logits;   // exit-logit part of the activation peak
  std::vector<double> peak_memory;        // parameters plus peak_activation
  std::vector<std::size_t> peak_in_flight;
  // Warm-up of the first microbatch + steady phase of the last stage + cool-down of the
  // last microbatch. Only meaningful without fill.
  double decomposed_span = 0.0;
  bool decomposition_holds = true;

  double max_peak_memory() const;
};

// Event-driven replay of the 1F1B lists under the cost model. Throws kInvalidArgument for
// a fill plan that does not fit the stage count, kInternal if the lists deadlock.
Timeline Simulate(const CostModel &cost, ExitMode mode, const FillPlan &fill = {});

// Longest path through the dependency graph of the same lists, by enumerating every path.
// Exponential; intended for P <= 3 and M <= 4.
double BruteForceSpan(const CostModel &cost, ExitMode mode, const FillPlan &fill = {});

// Closed forms for the time overhead of k early exits on non-last stages.
struct SpanOverhead {
  double plain = 0.0;      // k * (f_ee + b_ee), eager or deferred
  double reordered = 0.0;  // k * b_ee
  double reduction = 0.0;  // plain - reordered = k * f_ee
};
SpanOverhead FurtherOptimizedSpan(const CostModel &cost, std::size_t k);

// Explicit bubbles measured on an unfilled backbone-only timeline, and the fill sizes
// obtained by packing whole microbatches into them one at a time.
struct BubbleGeometry {
  double first_stage_gap = 0.0;  // between the first steady forward and the first backward on stage 0
  double last_stage_tail = 0.0;  // idle time on the last stage after its final backward
  std::size_t k_part1 = 0;
  std::size_t k_part2 = 0;
  std::vector<std::size_t> part2_depths;
};
BubbleGeometry MeasureBubbles(std::size_t num_stages, double f, double b);

// Line-delimited JSON, one record per event.
std::string TimelineToJsonLines(const Timeline &timeline);
// Gantt chart: stages as rows, one labelled block per event.
std::string TimelineToSvg(const Timeline &timeline);

// Per-stage record of what a training iteration actually executed.
struct ExecutionTrace {
  std::vector<std::vector<Action>> executed;
  std::vector<double> peak_activation;
  std::vector<std::size_t> activations_sent;  // per boundary r -> r + 1
  std::vector<std::size_t> gradients_sent;    // per boundary r + 1 -> r
};

// Human-readable differences between a simulated timeline and an executed iteration; empty
// when event counts, per-stage orderings, message counts and memory units all agree.
std::vector<std::string> VerifyAgainstReplay(const Timeline &timeline, const ExecutionTrace &trace);

}  // namespace exitpipe

#endif  // EXITPIPE_SCHEDULE_SIMULATOR_H_
