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

#include "exitpipe/pipeline/engine.h"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>

#include "exitpipe/error.h"
#include "exitpipe/pipeline/channel.h"
#include "exitpipe/tensor/ops.h"

namespace exitpipe {
namespace {

using Clock = std::chrono::steady_clock;

double Seconds(Clock::time_point since) { return std::chrono::duration<double>(Clock::now() - since).count(); }

// A microbatch whose forward step ran on this stage and whose backward step has not.
struct InFlight {
  std::unique_ptr<Tape> tape;
  ParamLookup lookup;
  Var input;
  StageForward forward;
  std::vector<Var> losses;  // eager heads only
  double units = 0.0;
  double transient_units = 0.0;  // logits of deferred heads while they exist
};

struct StageOutput {
  std::map<std::size_t, GradientMap> grads;
  std::vector<double> exit_loss_sums;
  std::vector<Action> executed;
  double peak = 0.0;
  std::size_t peak_in_flight = 0;
  std::size_t activations_sent = 0;
  std::size_t gradients_sent = 0;
  double forward_seconds = 0.0;
  double backward_seconds = 0.0;
};

struct Links {
  explicit Links(std::size_t boundaries, std::size_t capacity) {
    for (std::size_t i = 0; i < boundaries; ++i) {
      activations.push_back(std::make_unique<Channel<ActivationMessage>>(capacity));
      gradients.push_back(std::make_unique<Channel<GradientMessage>>(capacity));
    }
  }
  void CloseAll() {
    for (auto &c : activations) c->Close();
    for (auto &c : gradients) c->Close();
  }
  std::vector<std::unique_ptr<Channel<ActivationMessage>>> activations;  // r -> r + 1
  std::vector<std::unique_ptr<Channel<GradientMessage>>> gradients;      // r + 1 -> r
};

void CheckFinite(double value, std::size_t stage, std::size_t mb) {
  EXITPIPE_CHECK(std::isfinite(value), ErrorKind::kNonFinite,
                 "non-finite loss on stage " + std::to_string(stage) + ", microbatch " + std::to_string(mb));
}

class StageWorker {
 public:
  StageWorker(std::size_t r, const StageSetup &setup, const PipelineSchedule &schedule, const IterationOptions &options,
              const FillScaling &scaling, Links &links)
      : r_(r), setup_(setup), program_(*setup.program), schedule_(schedule), options_(options), scaling_(scaling),
        links_(links), inv_batch_(1.0 / static_cast<double>(schedule.num_regular)) {
    const std::string where = "stage " + std::to_string(r);
    if (r > 0) {
      activations_.emplace(*links.activations[r - 1], schedule.ActivationOrder(r - 1), options.message_timeout,
                           where + " activations");
    }
    if (r + 1 < schedule.num_stages) {
      gradients_.emplace(*links.gradients[r], schedule.GradientOrder(r), options.message_timeout,
                         where + " gradients");
    }
  }

  StageOutput Run() {
    out_.exit_loss_sums.assign(options_.weights.size(), 0.0);
    for (const Action &a : schedule_.actions[r_]) {
      EXITPIPE_CHECK(a.mb < schedule_.routes.size(), ErrorKind::kProtocolViolation,
                     "unknown microbatch " + std::to_string(a.mb));
      const auto start = Clock::now();
      switch (a.kind) {
        case ActionKind::kForward:
          Forward(a.mb);
          out_.forward_seconds += Seconds(start);
          break;
        case ActionKind::kBackward:
          Backward(a.mb);
          out_.backward_seconds += Seconds(start);
          break;
        case ActionKind::kExitForward:
          throw Error(ErrorKind::kInvalidArgument, "split exit forwards are only simulated");
      }
      out_.executed.push_back(a);
    }
    EXITPIPE_CHECK(in_flight_.empty(), ErrorKind::kProtocolViolation,
                   "stage " + std::to_string(r_) + " finished with microbatches still in flight");
    // Downstream readers waiting on this stage fail instead of hanging.
    if (r_ + 1 < schedule_.num_stages) links_.activations[r_]->Close();
    if (r_ > 0) links_.gradients[r_ - 1]->Close();
    return std::move(out_);
  }

 private:
  bool eager() const { return !options_.defer_exit_forward; }

  void Forward(std::size_t mb) {
    const Route &route = schedule_.routes[mb];
    EXITPIPE_CHECK(route.forwards(r_), ErrorKind::kProtocolViolation,
                   "microbatch " + std::to_string(mb) + " does not run forward on stage " + std::to_string(r_));
    std::optional<Tensor> input;
    if (r_ > 0) {
      input = activations_->Take(mb).hidden;
    }
    if (!route.backwards(r_)) {
      // Forward only: no gradient leaves, nothing kept.
      Tape tape;
      const ParamLookup constants = [&](const std::string &name) { return tape.Constant(setup_.params.at(name)); };
      const Var x = input ? tape.Constant(std::move(*input)) : Var{};
      const StageForward fwd = program_.Forward(tape, constants, mb, x);
      Send(mb, route, tape.value(fwd.output));
      return;
    }

    auto [it, inserted] = in_flight_.try_emplace(mb);
    EXITPIPE_CHECK(inserted, ErrorKind::kProtocolViolation,
                   "microbatch " + std::to_string(mb) + " forwarded twice on stage " + std::to_string(r_));
    InFlight &f = it->second;
    f.tape = std::make_unique<Tape>();
    Tape &tape = *f.tape;
    f.lookup = LeafLookup(tape, setup_.params);
    if (input) {
      f.input = route.sends_gradient(r_) ? tape.Leaf(kInputLeaf, *input) : tape.Constant(std::move(*input));
    }
    f.forward = program_.Forward(tape, f.lookup, mb, f.input);
    Send(mb, route, tape.value(f.forward.output));

    f.units = program_.ActivationUnits();
    if (eager()) {
      for (std::size_t k = 0; k < program_.num_exits(); ++k) {
        const Var head = program_.Head(tape, f.lookup, k, f.forward.taps[k]);
        f.units += static_cast<double>(tape.value(head).numel());
        f.losses.push_back(program_.Loss(tape, mb, k, head));
      }
    } else if (program_.num_exits() > 0) {
      deferred_.Defer(mb, [this, &f, mb] {
        std::vector<Var> losses;
        for (std::size_t k = 0; k < program_.num_exits(); ++k) {
          const Var head = program_.Head(*f.tape, f.lookup, k, f.forward.taps[k]);
          f.transient_units += static_cast<double>(f.tape->value(head).numel());
          losses.push_back(program_.Loss(*f.tape, mb, k, head));
        }
        return losses;
      });
    }
    current_ += f.units;
    out_.peak = std::max(out_.peak, current_);
    out_.peak_in_flight = std::max(out_.peak_in_flight, in_flight_.size());
  }

  void Send(std::size_t mb, const Route &route, const Tensor &output) {
    if (route.forwards(r_ + 1)) {
      links_.activations[r_]->Push({mb, output});
      ++out_.activations_sent;
    }
  }

  void Backward(std::size_t mb) {
    const Route &route = schedule_.routes[mb];
    auto it = in_flight_.find(mb);
    EXITPIPE_CHECK(it != in_flight_.end() && route.backwards(r_), ErrorKind::kProtocolViolation,
                   "no stored activation for microbatch " + std::to_string(mb) + " on stage " + std::to_string(r_));
    std::optional<Tensor> received;
    if (route.receives_gradient(r_)) {
      received = gradients_->Take(mb).gradient;
    }
    InFlight &f = it->second;
    Tape &tape = *f.tape;
    std::vector<Var> losses = f.losses;
    if (!eager() && program_.num_exits() > 0) {
      // Logits are created, used and dropped within this step.
      losses = deferred_.Run(mb);
      out_.peak = std::max(out_.peak, current_ + f.transient_units);
    }

    Var local;
    if (!losses.empty()) {
      std::vector<double> w;
      for (std::size_t k = 0; k < losses.size(); ++k) {
        const std::size_t j = program_.exit_index(k);
        const double value = tape.value(losses[k]).item();
        CheckFinite(value, r_, mb);
        if (route.kind == MicrobatchKind::kRegular) {
          out_.exit_loss_sums[j] += value;
        }
        const bool scaled = options_.rescale_fill && route.kind != MicrobatchKind::kPart2;
        w.push_back(scaled ? options_.weights[j] * scaling_.exit_factor[j] : options_.weights[j]);
      }
      local = ops::Scale(tape, graph::WeightedSum(tape, losses, w), inv_batch_);
    }
    EXITPIPE_CHECK(local.valid() || received, ErrorKind::kInvalidArgument,
                   "microbatch " + std::to_string(mb) + " ends on stage " + std::to_string(r_) +
                       ", which has no exit");
    const Var aux = AuxiliaryLoss(tape, local, f.forward.output, received ? &*received : nullptr);
    GradientMap grads = tape.Backward(aux);
    if (route.sends_gradient(r_)) {
      auto g = grads.find(kInputLeaf);
      EXITPIPE_CHECK(g != grads.end(), ErrorKind::kInternal, "no gradient for the received activation");
      links_.gradients[r_ - 1]->Push({mb, Tensor(tape.value(f.input).shape(), std::move(g->second))});
      grads.erase(g);
      ++out_.gradients_sent;
    }
    current_ -= f.units;
    in_flight_.erase(it);
    out_.grads.emplace(mb, std::move(grads));
  }

  std::size_t r_;
  const StageSetup &setup_;
  const StageProgram &program_;
  const PipelineSchedule &schedule_;
  const IterationOptions &options_;
  const FillScaling &scaling_;
  Links &links_;
  const double inv_batch_;
  std::optional<Inbox<ActivationMessage>> activations_;
  std::optional<Inbox<GradientMessage>> gradients_;
  std::map<std::size_t, InFlight> in_flight_;
  DeferredExits deferred_;
  double current_ = 0.0;
  StageOutput out_;
};

}  // namespace

void DeferredExits::Defer(std::size_t microbatch, Closure closure) {
  EXITPIPE_CHECK(closures_.emplace(microbatch, std::move(closure)).second, ErrorKind::kProtocolViolation,
                 "exit forward of microbatch " + std::to_string(microbatch) + " deferred twice");
}

std::vector<Var> DeferredExits::Run(std::size_t microbatch) {
  auto it = closures_.find(microbatch);
  EXITPIPE_CHECK(it != closures_.end(), ErrorKind::kProtocolViolation,
                 "no deferred exit forward for microbatch " + std::to_string(microbatch));
  Closure closure = std::move(it->second);
  closures_.erase(it);
  return closure();
}

FillScaling ComputeFillScaling(const PipelineSchedule &schedule, const std::vector<std::vector<std::size_t>> &stage_exits,
                               std::size_t num_exits) {
  EXITPIPE_CHECK(stage_exits.size() == schedule.num_stages, ErrorKind::kInvalidArgument,
                 "exit placement does not match the stage count");
  EXITPIPE_CHECK(schedule.num_regular > 0, ErrorKind::kInvalidArgument, "schedule has no regular microbatches");
  const double B = static_cast<double>(schedule.num_regular);
  FillScaling s;
  s.part1_visits.assign(num_exits, 0);
  s.part2_cover.assign(schedule.num_stages, 0);
  for (const Route &route : schedule.routes) {
    if (route.kind == MicrobatchKind::kPart1) {
      for (std::size_t r = 0; r < schedule.num_stages; ++r) {
        for (std::size_t j : stage_exits[r]) {
          EXITPIPE_CHECK(j < num_exits, ErrorKind::kInvalidArgument, "exit index out of range");
          s.part1_visits[j] += route.forwards(r) ? 1 : 0;
        }
      }
    } else if (route.kind == MicrobatchKind::kPart2) {
      for (std::size_t r = 0; r < schedule.num_stages; ++r) {
        s.part2_cover[r] += route.backwards(r) ? 1 : 0;
      }
    }
  }
  for (std::size_t m : s.part1_visits) {
    s.exit_factor.push_back(B / (B + static_cast<double>(m)));
  }
  for (std::size_t n : s.part2_cover) {
    s.stage_factor.push_back(B / (B + static_cast<double>(n)));
  }
  return s;
}

std::vector<StageSetup> MakeStageSetups(const EarlyExitModel &model, const StagePartition &partition,
                                        const std::vector<const StageProgram *> &programs) {
  EXITPIPE_CHECK(programs.size() == partition.num_stages(), ErrorKind::kInvalidArgument,
                 "need one program per stage");
  std::vector<StageSetup> out;
  for (std::size_t r = 0; r < programs.size(); ++r) {
    const StageLayout &layout = partition.stages[r];
    out.push_back({programs[r], StageParameters(model, layout), layout.replicas});
  }
  return out;
}

PipelineEngine::PipelineEngine(std::size_t num_stages) : pool_(num_stages) {}

IterationResult PipelineEngine::Run(const std::vector<StageSetup> &stages, const PipelineSchedule &schedule,
                                    const IterationOptions &options) {
  const std::size_t P = num_stages();
  EXITPIPE_CHECK(stages.size() == P && schedule.num_stages == P && schedule.actions.size() == P,
                 ErrorKind::kInvalidArgument, "engine, stages and schedule disagree on the stage count");
  EXITPIPE_CHECK(schedule.num_regular > 0, ErrorKind::kInvalidArgument, "schedule has no regular microbatches");
  for (double w : options.weights) {
    EXITPIPE_CHECK(std::isfinite(w) && w >= 0.0, ErrorKind::kInvalidArgument, "loss weights must be non-negative");
  }
  std::vector<std::vector<std::size_t>> stage_exits(P);
  bool tied = false;
  for (std::size_t r = 0; r < P; ++r) {
    EXITPIPE_CHECK(stages[r].program != nullptr, ErrorKind::kInvalidArgument, "stage without a program");
    for (std::size_t k = 0; k < stages[r].program->num_exits(); ++k) {
      const std::size_t j = stages[r].program->exit_index(k);
      EXITPIPE_CHECK(j < options.weights.size(), ErrorKind::kInvalidArgument,
                     "no loss weight for exit " + std::to_string(j));
      stage_exits[r].push_back(j);
    }
    tied = tied || !stages[r].replicas.empty();
  }
  std::size_t part1 = 0, part2 = 0;
  for (std::size_t id = 0; id < schedule.routes.size(); ++id) {
    const Route &route = schedule.routes[id];
    EXITPIPE_CHECK(route.forward_stages >= 1 && route.forward_stages <= P && route.backward_begin < route.forward_stages,
                   ErrorKind::kInvalidArgument, "malformed route for microbatch " + std::to_string(id));
    if (route.kind == MicrobatchKind::kRegular) {
      EXITPIPE_CHECK(route.forward_stages == P && route.backward_begin == 0, ErrorKind::kInvalidArgument,
                     "regular microbatches run through every stage");
      continue;
    }
    EXITPIPE_CHECK(!tied, ErrorKind::kInvalidConfig, "bubble filling cannot be combined with tied parameters");
    if (route.kind == MicrobatchKind::kPart1) {
      ++part1;
      EXITPIPE_CHECK(!stage_exits[route.forward_stages - 1].empty(), ErrorKind::kInvalidArgument,
                     "Part 1 microbatch " + std::to_string(id) + " ends on a stage without exits");
    } else {
      ++part2;
    }
  }
  const FillScaling scaling = ComputeFillScaling(schedule, stage_exits, options.weights.size());

  Links links(P - 1, schedule.routes.size());
  std::vector<StageOutput> outputs(P);
  const auto start = Clock::now();
  pool_.Run(
      [&](std::size_t r) {
        StageWorker worker(r, stages[r], schedule, options, scaling, links);
        outputs[r] = worker.Run();
      },
      [&] { links.CloseAll(); });
  const double wall = Seconds(start);

  IterationResult result;
  TrainStepReport &report = result.report;
  report.wall_seconds = wall;
  report.exit_losses.assign(options.weights.size(), 0.0);
  report.regular_microbatches = schedule.num_regular;
  report.part1_microbatches = part1;
  report.part2_microbatches = part2;
  result.trace.executed.resize(P);
  result.trace.activations_sent.assign(P - 1, 0);
  result.trace.gradients_sent.assign(P - 1, 0);
  if (options.keep_microbatch_grads) {
    result.microbatch_grads.resize(P);
  }
  std::vector<StageGradients> per_stage(P);
  for (std::size_t r = 0; r < P; ++r) {
    StageOutput &o = outputs[r];
    for (std::size_t j = 0; j < o.exit_loss_sums.size(); ++j) {
      report.exit_losses[j] += o.exit_loss_sums[j] / static_cast<double>(schedule.num_regular);
    }
    // Fixed accumulation order: microbatch id.
    GradientMap acc;
    for (const auto &[name, t] : stages[r].params) {
      acc.emplace(name, std::vector<double>(t.numel(), 0.0));
    }
    for (const auto &[mb, grads] : o.grads) {
      for (const auto &[name, g] : grads) {
        auto &a = acc.at(name);
        for (std::size_t i = 0; i < g.size(); ++i) {
          a[i] += g[i];
        }
      }
    }
    double factor = options.rescale_fill ? scaling.stage_factor[r] : 1.0;
    if (scaling.part2_cover[r] > 0) {
      factor *= options.stage_factor_bias;
    }
    double sq = 0.0;
    for (auto &[name, a] : acc) {
      for (double &v : a) {
        v *= factor;
        sq += v * v;
      }
    }
    report.stage_grad_norms.push_back(std::sqrt(sq));
    report.forward_seconds.push_back(o.forward_seconds);
    report.backward_seconds.push_back(o.backward_seconds);
    report.peak_activation.push_back(o.peak);
    report.peak_in_flight.push_back(o.peak_in_flight);
    result.trace.executed[r] = std::move(o.executed);
    result.trace.peak_activation.push_back(o.peak);
    if (r + 1 < P) result.trace.activations_sent[r] = o.activations_sent;
    if (r > 0) result.trace.gradients_sent[r - 1] = o.gradients_sent;

    for (const auto &name : stages[r].replicas) {
      auto node = acc.extract(name);
      EXITPIPE_CHECK(!node.empty(), ErrorKind::kInvalidArgument, "replica '" + name + "' is not a stage parameter");
      per_stage[r].replicas.insert(std::move(node));
    }
    per_stage[r].owned = std::move(acc);
    if (options.keep_microbatch_grads) {
      result.microbatch_grads[r] = std::move(o.grads);
    }
  }
  result.grads = SyncTied(per_stage);
  return result;
}

}  // namespace exitpipe
