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

#ifndef EXITPIPE_SCHEDULE_PLAN_H_
#define EXITPIPE_SCHEDULE_PLAN_H_

#include <cstddef>
#include <string>
#include <vector>

namespace exitpipe {

// Partial microbatches inserted into the explicit bubbles of one 1F1B iteration.
// Part 1 sits between warm-up and steady phase, Part 2 in the cool-down phase.
struct FillPlan {
  // Inserted microbatch i (0-based here) of Part 1 runs forward and backward through the
  // first part1_forward_depth[i] stages; a depth of 0 means it is skipped.
  std::vector<std::size_t> part1_forward_depth;
  // Inserted microbatch i of Part 2 runs forward through all stages and backward through
  // the last part2_backward_depth[i] stages.
  std::vector<std::size_t> part2_backward_depth;
  // Forward:backward ratio the plan was sized for. Orders the Part 2 work after cool-down.
  double f_over_b = 1.0;

  std::size_t k_part1() const { return part1_forward_depth.size(); }
  std::size_t k_part2() const { return part2_backward_depth.size(); }
  bool empty() const { return part1_forward_depth.empty() && part2_backward_depth.empty(); }
  bool operator==(const FillPlan &) const = default;
};

// floor((P - 1) / (f_over_b + 1)) microbatches per part. Part 1 microbatch i (1-based)
// visits the first K + 1 - i stages; Part 2 microbatch i backs through floor(P - i (f_over_b + 1))
// stages. Throws kInvalidArgument unless P >= 2 and f_over_b > 0.
FillPlan PlanBubbleFill(std::size_t num_stages, double f_over_b);

// The same bubble count the closed form gives, for documentation and tests.
std::size_t FillCount(std::size_t num_stages, double f_over_b);

// Part 1 only pays off up to the deepest visited stage that holds an early exit. Truncates
// each forward depth accordingly; microbatches that reach no exit get depth 0.
FillPlan RestrictPart1ToExits(FillPlan plan, const std::vector<bool> &stage_has_early_exit);

enum class ActionKind {
  kForward,
  kBackward,
  // Forward of the exit heads split out of a cool-down backward step (simulation only).
  kExitForward,
};

const char *ActionKindName(ActionKind kind);

struct Action {
  ActionKind kind;
  std::size_t mb;
  bool operator==(const Action &) const = default;
};

enum class MicrobatchKind { kRegular, kPart1, kPart2 };

struct Route {
  MicrobatchKind kind = MicrobatchKind::kRegular;
  // Forward through stages [0, forward_stages); backward through [backward_begin, forward_stages).
  std::size_t forward_stages = 0;
  std::size_t backward_begin = 0;

  bool forwards(std::size_t stage) const { return stage < forward_stages; }
  bool backwards(std::size_t stage) const { return stage >= backward_begin && stage < forward_stages; }
  // The stage receives a gradient from the next stage for this microbatch.
  bool receives_gradient(std::size_t stage) const { return backwards(stage) && stage + 1 < forward_stages; }
  // The stage sends a gradient to the previous stage.
  bool sends_gradient(std::size_t stage) const { return backwards(stage) && stage > backward_begin; }
};

// Precomputed per-stage action lists for one iteration. Microbatch ids: regular 0..M-1,
// then the Part 1 inserts, then the Part 2 inserts (skipped Part 1 entries get no id).
struct PipelineSchedule {
  std::size_t num_stages = 0;
  std::size_t num_regular = 0;
  std::vector<Route> routes;
  std::vector<std::vector<Action>> actions;

  // Ids that flow across the boundary between stage r and r + 1, in send order.
  std::vector<std::size_t> ActivationOrder(std::size_t stage) const;
  std::vector<std::size_t> GradientOrder(std::size_t stage) const;
};

// 1F1B lists: stage r runs min(P - r - 1, M) warm-up forwards, then alternates forward and
// backward, then drains the remaining backwards. With split_exit_forward, each cool-down
// backward on a stage flagged in stage_has_exits is preceded by its own kExitForward action.
// A non-empty fill plan requires num_microbatches >= num_stages.
PipelineSchedule BuildSchedule(std::size_t num_stages, std::size_t num_microbatches, const FillPlan &plan = {},
                               bool split_exit_forward = false, const std::vector<bool> &stage_has_exits = {});

std::string DescribeActions(const std::vector<Action> &actions);

}  // namespace exitpipe

#endif  // EXITPIPE_SCHEDULE_PLAN_H_
