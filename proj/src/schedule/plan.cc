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

#include "exitpipe/schedule/plan.h"

#include <algorithm>
#include <cmath>

#include "exitpipe/error.h"

namespace exitpipe {
namespace {

// Floors of the closed forms are taken with a small tolerance so that ratios such as
// 0.5 or 1/3 that are not exact in binary land on the intended integer.
std::size_t FloorTolerant(double x) { return x <= 0.0 ? 0 : static_cast<std::size_t>(std::floor(x + 1e-9)); }

}  // namespace

std::size_t FillCount(std::size_t num_stages, double f_over_b) {
  EXITPIPE_CHECK(num_stages >= 2, ErrorKind::kInvalidArgument, "bubble filling needs at least two stages");
  EXITPIPE_CHECK(f_over_b > 0.0 && std::isfinite(f_over_b), ErrorKind::kInvalidArgument, "f/b must be positive");
  return FloorTolerant(static_cast<double>(num_stages - 1) / (f_over_b + 1.0));
}

FillPlan PlanBubbleFill(std::size_t num_stages, double f_over_b) {
  const std::size_t k = FillCount(num_stages, f_over_b);
  FillPlan plan;
  plan.f_over_b = f_over_b;
  for (std::size_t i = 1; i <= k; ++i) {
    plan.part1_forward_depth.push_back(k + 1 - i);
    const double depth = static_cast<double>(num_stages) - static_cast<double>(i) * (f_over_b + 1.0);
    plan.part2_backward_depth.push_back(std::min(FloorTolerant(depth), num_stages));
  }
  return plan;
}

FillPlan RestrictPart1ToExits(FillPlan plan, const std::vector<bool> &stage_has_early_exit) {
  for (auto &depth : plan.part1_forward_depth) {
    std::size_t truncated = 0;
    for (std::size_t r = 0; r < depth && r < stage_has_early_exit.size(); ++r) {
      if (stage_has_early_exit[r]) {
        truncated = r + 1;
      }
    }
    depth = truncated;
  }
  return plan;
}

const char *ActionKindName(ActionKind kind) {
  switch (kind) {
    case ActionKind::kForward:
      return "F";
    case ActionKind::kBackward:
      return "B";
    case ActionKind::kExitForward:
      return "E";
  }
  return "?";
}

std::vector<std::size_t> PipelineSchedule::ActivationOrder(std::size_t stage) const {
  std::vector<std::size_t> out;
  for (const Action &a : actions.at(stage)) {
    if (a.kind == ActionKind::kForward && routes[a.mb].forwards(stage + 1)) {
      out.push_back(a.mb);
    }
  }
  return out;
}

std::vector<std::size_t> PipelineSchedule::GradientOrder(std::size_t stage) const {
  std::vector<std::size_t> out;
  for (const Action &a : actions.at(stage + 1)) {
    if (a.kind == ActionKind::kBackward && routes[a.mb].sends_gradient(stage + 1)) {
      out.push_back(a.mb);
    }
  }
  return out;
}

PipelineSchedule BuildSchedule(std::size_t num_stages, std::size_t num_microbatches, const FillPlan &plan,
                               bool split_exit_forward, const std::vector<bool> &stage_has_exits) {
  const std::size_t P = num_stages, M = num_microbatches;
  EXITPIPE_CHECK(P >= 1 && M >= 1, ErrorKind::kInvalidArgument, "schedule needs at least one stage and microbatch");
  EXITPIPE_CHECK(!split_exit_forward || stage_has_exits.size() == P, ErrorKind::kInvalidArgument,
                 "splitting exit forwards needs the exit placement of every stage");
  for (std::size_t d : plan.part1_forward_depth) {
    EXITPIPE_CHECK(d < P, ErrorKind::kInvalidArgument, "Part 1 microbatches cannot reach the last stage");
  }
  for (std::size_t d : plan.part2_backward_depth) {
    EXITPIPE_CHECK(d >= 1 && d <= P, ErrorKind::kInvalidArgument, "Part 2 backward depth out of range");
  }
  EXITPIPE_CHECK(plan.empty() || M >= P, ErrorKind::kInvalidArgument,
                 "bubble filling needs at least as many microbatches as stages");
  EXITPIPE_CHECK(plan.f_over_b > 0.0, ErrorKind::kInvalidArgument, "fill plan needs a positive f/b");

  PipelineSchedule s;
  s.num_stages = P;
  s.num_regular = M;
  s.routes.assign(M, Route{MicrobatchKind::kRegular, P, 0});
  std::vector<std::size_t> part1, part2;
  for (std::size_t d : plan.part1_forward_depth) {
    if (d > 0) {
      part1.push_back(s.routes.size());
      s.routes.push_back(Route{MicrobatchKind::kPart1, d, 0});
    }
  }
  for (std::size_t d : plan.part2_backward_depth) {
    part2.push_back(s.routes.size());
    s.routes.push_back(Route{MicrobatchKind::kPart2, P, P - d});
  }

  s.actions.resize(P);
  for (std::size_t r = 0; r < P; ++r) {
    auto &list = s.actions[r];
    const std::size_t warmup = std::min(P - r - 1, M);
    const std::size_t part1_after = std::min(warmup + 1, M);
    std::size_t forwards = 0;
    auto forward = [&](std::size_t mb) {
      list.push_back({ActionKind::kForward, mb});
      if (++forwards != part1_after) {
        return;
      }
      // Part 1 block in the bubble before the first backward: nested forwards, then
      // backwards in reverse order. Stage r > 0 runs it before a regular forward that its
      // predecessor already sent, so receivers match messages by id.
      std::vector<std::size_t> visiting;
      for (std::size_t id : part1) {
        if (s.routes[id].forwards(r)) {
          visiting.push_back(id);
        }
      }
      for (std::size_t id : visiting) {
        list.push_back({ActionKind::kForward, id});
      }
      for (auto it = visiting.rbegin(); it != visiting.rend(); ++it) {
        list.push_back({ActionKind::kBackward, *it});
      }
    };

    for (std::size_t m = 0; m < warmup; ++m) {
      forward(m);
    }
    for (std::size_t j = 0; j + warmup < M; ++j) {
      forward(warmup + j);
      list.push_back({ActionKind::kBackward, j});
    }
    // Cool-down: one Part 2 forward in the gap before each backward.
    std::size_t next_part2 = 0;
    for (std::size_t m = M - warmup; m < M; ++m) {
      if (next_part2 < part2.size()) {
        list.push_back({ActionKind::kForward, part2[next_part2++]});
      }
      if (split_exit_forward && stage_has_exits[r]) {
        list.push_back({ActionKind::kExitForward, m});
      }
      list.push_back({ActionKind::kBackward, m});
    }
    if (r + 1 == P) {
      // The last stage turns each inserted forward around immediately.
      for (std::size_t id : part2) {
        list.push_back({ActionKind::kForward, id});
        list.push_back({ActionKind::kBackward, id});
      }
    } else {
      // Remaining Part 2 work in the order it would become ready on uniform stages, with
      // time measured from the end of the last regular backward on the last stage (b = 1).
      const double f = plan.f_over_b;
      const double depth = static_cast<double>(P - 1 - r);
      std::vector<std::pair<double, Action>> tail;
      for (; next_part2 < part2.size(); ++next_part2) {
        const double j = static_cast<double>(next_part2);
        tail.push_back({-depth * f + j * (f + 1.0), {ActionKind::kForward, part2[next_part2]}});
      }
      for (std::size_t i = 0; i < part2.size(); ++i) {
        if (s.routes[part2[i]].backwards(r)) {
          tail.push_back({static_cast<double>(i + 1) * (f + 1.0) + depth - 1.0, {ActionKind::kBackward, part2[i]}});
        }
      }
      std::stable_sort(tail.begin(), tail.end(), [](const auto &a, const auto &b) { return a.first < b.first; });
      for (const auto &[ready, action] : tail) {
        list.push_back(action);
      }
    }
  }
  return s;
}

std::string DescribeActions(const std::vector<Action> &actions) {
  std::string out;
  for (const Action &a : actions) {
    if (!out.empty()) {
      out += ' ';
    }
    out += ActionKindName(a.kind) + std::to_string(a.mb);
  }
  return out;
}

}  // namespace exitpipe
