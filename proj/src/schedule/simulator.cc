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

#include "exitpipe/schedule/simulator.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <tuple>
#include <sstream>

#include "exitpipe/error.h"
#include "json.hpp"

namespace exitpipe {
namespace {

// In deferred modes every head of a stage, the final head included, runs in the backward step.
bool HeadsInForward(ExitMode mode) { return mode == ExitMode::kStandard || mode == ExitMode::kEager; }

// Durations and memory effects of every action, shared by the simulator and the brute force.
class ActionCosts {
 public:
  ActionCosts(const CostModel &cost, ExitMode mode, const PipelineSchedule &schedule)
      : cost_(cost), mode_(mode), schedule_(schedule) {
    for (std::size_t r = 0; r < schedule.num_stages; ++r) {
      for (const Action &a : schedule.actions[r]) {
        if (a.kind == ActionKind::kExitForward) {
          split_.emplace(r, a.mb);
        }
      }
    }
  }

  // Heads evaluated on stage r for this microbatch.
  std::size_t heads(std::size_t r, std::size_t mb) const {
    return schedule_.routes[mb].backwards(r) ? cost_.heads_on(r, mode_) : 0;
  }
  bool split(std::size_t r, std::size_t mb) const { return split_.count({r, mb}) > 0; }
  // Logits stay alive from their forward until the backward step.
  bool held(std::size_t r, std::size_t mb) const { return HeadsInForward(mode_) || split(r, mb); }

  double duration(std::size_t r, const Action &a) const {
    const double h = static_cast<double>(heads(r, a.mb));
    switch (a.kind) {
      case ActionKind::kForward:
        return cost_.f + (r == 0 ? cost_.embed_forward : 0.0) + (HeadsInForward(mode_) ? h * cost_.f_ee : 0.0);
      case ActionKind::kBackward:
        return cost_.b + h * cost_.b_ee + (held(r, a.mb) ? 0.0 : h * cost_.f_ee);
      case ActionKind::kExitForward:
        return h * cost_.f_ee;
    }
    return 0.0;
  }

 private:
  const CostModel &cost_;
  ExitMode mode_;
  const PipelineSchedule &schedule_;
  std::set<std::pair<std::size_t, std::size_t>> split_;
};

PipelineSchedule ScheduleFor(const CostModel &cost, ExitMode mode, const FillPlan &fill) {
  const std::size_t P = cost.num_stages;
  std::vector<bool> has_heads(P);
  for (std::size_t r = 0; r < P; ++r) {
    has_heads[r] = cost.heads_on(r, mode) > 0;
  }
  return BuildSchedule(P, cost.num_microbatches, fill, mode == ExitMode::kDeferredReordered, has_heads);
}

// Predecessors of an action other than the previous action on the same stage.
struct Dep {
  std::size_t stage;
  ActionKind kind;
  bool cross_stage;
};

std::vector<Dep> Dependencies(const PipelineSchedule &s, std::size_t r, const Action &a) {
  const Route &route = s.routes[a.mb];
  std::vector<Dep> deps;
  if (a.kind == ActionKind::kForward && r > 0) {
    deps.push_back({r - 1, ActionKind::kForward, true});
  }
  if (a.kind == ActionKind::kBackward) {
    deps.push_back({r, ActionKind::kForward, false});
    if (route.receives_gradient(r)) {
      deps.push_back({r + 1, ActionKind::kBackward, true});
    }
  }
  if (a.kind == ActionKind::kExitForward) {
    deps.push_back({r, ActionKind::kForward, false});
  }
  return deps;
}

}  // namespace

const char *ExitModeName(ExitMode mode) {
  switch (mode) {
    case ExitMode::kStandard:
      return "standard";
    case ExitMode::kEager:
      return "eager";
    case ExitMode::kDeferred:
      return "deferred";
    case ExitMode::kDeferredReordered:
      return "deferred-reordered";
  }
  return "unknown";
}

ExitMode ParseExitMode(const std::string &name) {
  for (ExitMode m : {ExitMode::kStandard, ExitMode::kEager, ExitMode::kDeferred, ExitMode::kDeferredReordered}) {
    if (name == ExitModeName(m)) {
      return m;
    }
  }
  throw Error(ErrorKind::kParse, "unknown exit mode '" + name + "'");
}

CostModel CostModel::ReferencePreset() {
  CostModel c;
  c.num_stages = 4;
  c.num_microbatches = 6;
  c.f = 2.0;
  c.b = 4.0;
  c.f_ee = 1.0;
  c.b_ee = 2.0;
  c.early_exits = {0, 1, 1, 0};
  return c;
}

void CostModel::Validate() const {
  EXITPIPE_CHECK(num_stages >= 1 && num_microbatches >= 1, ErrorKind::kInvalidConfig,
                 "cost model needs at least one stage and one microbatch");
  EXITPIPE_CHECK(f > 0 && b > 0 && f_ee > 0 && b_ee > 0, ErrorKind::kInvalidConfig, "all step times must be positive");
  EXITPIPE_CHECK(embed_forward >= 0 && hop_latency >= 0, ErrorKind::kInvalidConfig,
                 "embedding time and hop latency must be non-negative");
  EXITPIPE_CHECK(early_exits.empty() || early_exits.size() == num_stages, ErrorKind::kInvalidConfig,
                 "early_exits needs one entry per stage");
  EXITPIPE_CHECK(param_units.empty() || param_units.size() == num_stages, ErrorKind::kInvalidConfig,
                 "param_units needs one entry per stage");
}

std::size_t CostModel::heads_on(std::size_t stage, ExitMode mode) const {
  const std::size_t final_head = stage + 1 == num_stages ? 1 : 0;
  if (mode == ExitMode::kStandard || early_exits.empty()) {
    return final_head;
  }
  return early_exits[stage] + final_head;
}

std::size_t CostModel::non_last_exits() const {
  std::size_t k = 0;
  for (std::size_t r = 0; r + 1 < early_exits.size(); ++r) {
    k += early_exits[r];
  }
  return k;
}

double Timeline::max_peak_memory() const {
  return peak_memory.empty() ? 0.0 : *std::max_element(peak_memory.begin(), peak_memory.end());
}

Timeline Simulate(const CostModel &cost, ExitMode mode, const FillPlan &fill) {
  cost.Validate();
  const std::size_t P = cost.num_stages;
  Timeline t;
  t.num_stages = P;
  t.mode = mode;
  t.schedule = ScheduleFor(cost, mode, fill);
  const PipelineSchedule &s = t.schedule;
  const ActionCosts costs(cost, mode, s);
  const std::size_t n = s.routes.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  // end_time[kind][stage][mb]
  std::vector<std::vector<std::vector<double>>> end_time(3, std::vector<std::vector<double>>(P, std::vector<double>(n, nan)));
  auto end_of = [&](ActionKind k, std::size_t r, std::size_t mb) -> double & {
    return end_time[static_cast<int>(k)][r][mb];
  };

  t.events.assign(P, {});
  t.busy.assign(P, 0.0);
  t.peak_activation.assign(P, 0.0);
  t.peak_exit_logits.assign(P, 0.0);
  t.peak_in_flight.assign(P, 0);
  std::vector<double> stored(P, 0.0), logits(P, 0.0), free_at(P, 0.0);
  std::vector<std::size_t> in_flight(P, 0), next(P, 0);
  const double act = cost.memory.StageActivationUnits();
  const double logit = cost.memory.LogitUnits();

  auto note_peak = [&](std::size_t r, double extra_logits) {
    t.peak_activation[r] = std::max(t.peak_activation[r], stored[r] + extra_logits);
    t.peak_exit_logits[r] = std::max(t.peak_exit_logits[r], logits[r] + extra_logits);
    t.peak_in_flight[r] = std::max(t.peak_in_flight[r], in_flight[r]);
  };

  std::size_t remaining = 0;
  for (const auto &list : s.actions) {
    remaining += list.size();
  }
  while (remaining > 0) {
    bool progress = false;
    for (std::size_t r = 0; r < P; ++r) {
      while (next[r] < s.actions[r].size()) {
        const Action a = s.actions[r][next[r]];
        double ready = free_at[r];
        bool ok = true;
        for (const Dep &d : Dependencies(s, r, a)) {
          const double e = end_of(d.kind, d.stage, a.mb);
          if (std::isnan(e)) {
            ok = false;
            break;
          }
          ready = std::max(ready, e + (d.cross_stage ? cost.hop_latency : 0.0));
        }
        if (!ok) {
          break;
        }
        const double dur = costs.duration(r, a);
        t.events[r].push_back(Event{r, a.kind, a.mb, ready, ready + dur});
        end_of(a.kind, r, a.mb) = ready + dur;
        free_at[r] = ready + dur;
        t.busy[r] += dur;

        // Memory effects.
        const double heads = static_cast<double>(costs.heads(r, a.mb)) * logit;
        const bool held = costs.held(r, a.mb);
        if (a.kind == ActionKind::kForward && s.routes[a.mb].backwards(r)) {
          const double kept = HeadsInForward(mode) ? heads : 0.0;
          stored[r] += act + kept;
          logits[r] += kept;
          ++in_flight[r];
          note_peak(r, 0.0);
        } else if (a.kind == ActionKind::kExitForward) {
          stored[r] += heads;
          logits[r] += heads;
          note_peak(r, 0.0);
        } else if (a.kind == ActionKind::kBackward) {
          note_peak(r, held ? 0.0 : heads);
          stored[r] -= act + (held ? heads : 0.0);
          logits[r] -= held ? heads : 0.0;
          --in_flight[r];
        }
        ++next[r];
        --remaining;
        progress = true;
      }
    }
    EXITPIPE_CHECK(progress, ErrorKind::kInternal, "schedule deadlocked during simulation");
  }

  for (std::size_t r = 0; r < P; ++r) {
    t.span = std::max(t.span, t.events[r].empty() ? 0.0 : t.events[r].back().end);
    t.peak_memory.push_back(t.peak_activation[r] + (cost.param_units.empty() ? 0.0 : cost.param_units[r]));
  }

  // Critical-path decomposition for the unfilled schedule.
  const std::size_t M = cost.num_microbatches;
  double decomposed = 2.0 * static_cast<double>(P - 1) * cost.hop_latency;
  for (std::size_t r = 0; r + 1 < P; ++r) {
    decomposed += costs.duration(r, {ActionKind::kForward, 0}) + costs.duration(r, {ActionKind::kBackward, M - 1});
  }
  for (std::size_t m = 0; m < M; ++m) {
    decomposed += costs.duration(P - 1, {ActionKind::kForward, m}) + costs.duration(P - 1, {ActionKind::kBackward, m});
  }
  t.decomposed_span = decomposed;
  t.decomposition_holds = fill.empty() && std::abs(decomposed - t.span) <= 1e-9 * std::max(1.0, t.span);
  return t;
}

double BruteForceSpan(const CostModel &cost, ExitMode mode, const FillPlan &fill) {
  cost.Validate();
  const PipelineSchedule s = ScheduleFor(cost, mode, fill);
  const ActionCosts costs(cost, mode, s);
  const std::size_t P = s.num_stages;

  // Node = (stage, position in list). Successor edges carry the hop latency if cross-stage.
  std::map<std::tuple<std::size_t, ActionKind, std::size_t>, std::pair<std::size_t, std::size_t>> where;
  for (std::size_t r = 0; r < P; ++r) {
    for (std::size_t i = 0; i < s.actions[r].size(); ++i) {
      const Action &a = s.actions[r][i];
      where[{r, a.kind, a.mb}] = {r, i};
    }
  }
  std::vector<std::vector<std::vector<std::pair<std::pair<std::size_t, std::size_t>, double>>>> succ(P);
  std::vector<std::vector<bool>> has_pred(P);
  for (std::size_t r = 0; r < P; ++r) {
    succ[r].resize(s.actions[r].size());
    has_pred[r].assign(s.actions[r].size(), false);
  }
  for (std::size_t r = 0; r < P; ++r) {
    for (std::size_t i = 0; i < s.actions[r].size(); ++i) {
      const Action &a = s.actions[r][i];
      if (i + 1 < s.actions[r].size()) {
        succ[r][i].push_back({{r, i + 1}, 0.0});
        has_pred[r][i + 1] = true;
      }
      for (const Dep &d : Dependencies(s, r, a)) {
        const auto [pr, pi] = where.at({d.stage, d.kind, a.mb});
        succ[pr][pi].push_back({{r, i}, d.cross_stage ? cost.hop_latency : 0.0});
        has_pred[r][i] = true;
      }
    }
  }
  // Enumerate every path from every source.
  double best = 0.0;
  std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t r, std::size_t i, double acc) {
    acc += costs.duration(r, s.actions[r][i]);
    best = std::max(best, acc);
    for (const auto &[node, w] : succ[r][i]) {
      walk(node.first, node.second, acc + w);
    }
  };
  for (std::size_t r = 0; r < P; ++r) {
    for (std::size_t i = 0; i < s.actions[r].size(); ++i) {
      if (!has_pred[r][i]) {
        walk(r, i, 0.0);
      }
    }
  }
  return best;
}

SpanOverhead FurtherOptimizedSpan(const CostModel &cost, std::size_t k) {
  SpanOverhead o;
  const double kk = static_cast<double>(k);
  o.plain = kk * (cost.f_ee + cost.b_ee);
  o.reordered = kk * cost.b_ee;
  o.reduction = o.plain - o.reordered;
  return o;
}

BubbleGeometry MeasureBubbles(std::size_t num_stages, double f, double b) {
  EXITPIPE_CHECK(num_stages >= 2, ErrorKind::kInvalidArgument, "bubbles need at least two stages");
  CostModel cost;
  cost.num_stages = num_stages;
  cost.num_microbatches = 2 * num_stages;
  cost.f = f;
  cost.b = b;
  // Backbone only: exit heads cost (almost) nothing so the geometry is that of plain 1F1B.
  cost.f_ee = cost.b_ee = 1e-300;
  const Timeline t = Simulate(cost, ExitMode::kStandard);
  const auto &first = t.events.front();
  const std::size_t warmup = num_stages - 1;
  double first_backward = 0.0;
  for (const Event &e : first) {
    if (e.kind == ActionKind::kBackward) {
      first_backward = e.start;
      break;
    }
  }
  BubbleGeometry g;
  g.first_stage_gap = first_backward - first[warmup].end;
  g.last_stage_tail = t.span - t.events.back().back().end;
  const double tol = 1e-9 * (f + b);
  while (static_cast<double>(g.k_part1 + 1) * (f + b) <= g.first_stage_gap + tol) {
    ++g.k_part1;
  }
  while (static_cast<double>(g.k_part2 + 1) * (f + b) <= g.last_stage_tail + tol) {
    ++g.k_part2;
  }
  for (std::size_t i = 1; i <= g.k_part2; ++i) {
    const double left = g.last_stage_tail - f - static_cast<double>(i - 1) * (f + b);
    std::size_t d = 0;
    while (static_cast<double>(d + 1) * b <= left + tol) {
      ++d;
    }
    g.part2_depths.push_back(d);
  }
  return g;
}

std::string TimelineToJsonLines(const Timeline &timeline) {
  std::string out;
  for (const auto &stage : timeline.events) {
    for (const Event &e : stage) {
      const Route &route = timeline.schedule.routes[e.mb];
      nlohmann::json rec = {{"stage", e.stage},
                            {"kind", ActionKindName(e.kind)},
                            {"microbatch", e.mb},
                            {"start", e.start},
                            {"end", e.end}};
      if (route.kind != MicrobatchKind::kRegular) {
        rec["fill"] = route.kind == MicrobatchKind::kPart1 ? "part1" : "part2";
      }
      out += rec.dump() + "\n";
    }
  }
  return out;
}

std::string TimelineToSvg(const Timeline &timeline) {
  const double scale = 800.0 / std::max(timeline.span, 1e-12);
  const double row = 36.0, left = 70.0, top = 20.0;
  const double width = left + 800.0 + 20.0;
  const double height = top + row * static_cast<double>(timeline.num_stages) + 40.0;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"monospace\" font-size=\"11\">\n";
  for (std::size_t r = 0; r < timeline.num_stages; ++r) {
    const double y = top + row * static_cast<double>(r);
    svg << "<text x=\"5\" y=\"" << y + row / 2 + 4 << "\">stage " << r + 1 << "</text>\n";
    for (const Event &e : timeline.events[r]) {
      const Route &route = timeline.schedule.routes[e.mb];
      const char *fill = e.kind == ActionKind::kForward ? "#9ecae1" : e.kind == ActionKind::kBackward ? "#3182bd" : "#fdae6b";
      if (route.kind != MicrobatchKind::kRegular) {
        fill = e.kind == ActionKind::kForward ? "#c7e9c0" : "#41ab5d";
      }
      const double x = left + e.start * scale, w = (e.end - e.start) * scale;
      svg << "<rect x=\"" << x << "\" y=\"" << y + 4 << "\" width=\"" << w << "\" height=\"" << row - 8
          << "\" fill=\"" << fill << "\" stroke=\"#222\" stroke-width=\"0.5\"/>\n";
      std::string label = route.kind == MicrobatchKind::kRegular ? std::to_string(e.mb + 1) : "P" + std::to_string(e.mb + 1);
      svg << "<text x=\"" << x + w / 2 << "\" y=\"" << y + row / 2 + 4 << "\" text-anchor=\"middle\">" << label
          << "</text>\n";
    }
  }
  svg << "<text x=\"" << left << "\" y=\"" << height - 12 << "\">" << ExitModeName(timeline.mode)
      << ", span " << timeline.span << "</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

std::vector<std::string> VerifyAgainstReplay(const Timeline &timeline, const ExecutionTrace &trace) {
  std::vector<std::string> issues;
  const std::size_t P = timeline.num_stages;
  if (trace.executed.size() != P) {
    issues.push_back("stage count: simulated " + std::to_string(P) + ", executed " +
                     std::to_string(trace.executed.size()));
    return issues;
  }
  for (std::size_t r = 0; r < P; ++r) {
    std::vector<Action> simulated;
    for (const Event &e : timeline.events[r]) {
      simulated.push_back({e.kind, e.mb});
    }
    if (simulated.size() != trace.executed[r].size()) {
      issues.push_back("stage " + std::to_string(r) + ": " + std::to_string(simulated.size()) +
                       " simulated events vs " + std::to_string(trace.executed[r].size()) + " executed");
    }
    const std::size_t common = std::min(simulated.size(), trace.executed[r].size());
    for (std::size_t i = 0; i < common; ++i) {
      if (!(simulated[i] == trace.executed[r][i])) {
        issues.push_back("stage " + std::to_string(r) + " position " + std::to_string(i) + ": simulated " +
                         ActionKindName(simulated[i].kind) + std::to_string(simulated[i].mb) + ", executed " +
                         ActionKindName(trace.executed[r][i].kind) + std::to_string(trace.executed[r][i].mb));
        break;
      }
    }
    if (r < trace.peak_activation.size() && trace.peak_activation[r] != timeline.peak_activation[r]) {
      std::ostringstream msg;
      msg << "stage " << r << ": peak activation simulated " << timeline.peak_activation[r] << ", executed "
          << trace.peak_activation[r];
      issues.push_back(msg.str());
    }
  }
  for (std::size_t r = 0; r + 1 < P; ++r) {
    const std::size_t acts = timeline.schedule.ActivationOrder(r).size();
    const std::size_t grads = timeline.schedule.GradientOrder(r).size();
    if (r < trace.activations_sent.size() && trace.activations_sent[r] != acts) {
      issues.push_back("boundary " + std::to_string(r) + ": " + std::to_string(trace.activations_sent[r]) +
                       " activation messages, expected " + std::to_string(acts));
    }
    if (r < trace.gradients_sent.size() && trace.gradients_sent[r] != grads) {
      issues.push_back("boundary " + std::to_string(r) + ": " + std::to_string(trace.gradients_sent[r]) +
                       " gradient messages, expected " + std::to_string(grads));
    }
  }
  return issues;
}

}  // namespace exitpipe
