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


#include "exitpipe/cli/suites.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <random>

#include "json.hpp"

#include "exitpipe/error.h"
#include "exitpipe/infer/generate.h"
#include "exitpipe/model/checkpoint.h"
#include "exitpipe/model/partition.h"
#include "exitpipe/pipeline/engine.h"
#include "exitpipe/pipeline/estimator.h"
#include "exitpipe/pipeline/linear_toy.h"
#include "exitpipe/pipeline/stage.h"
#include "exitpipe/pipeline/trainer.h"
#include "exitpipe/schedule/latency.h"
#include "exitpipe/schedule/plan.h"
#include "exitpipe/schedule/simulator.h"
#include "exitpipe/tensor/grad_check.h"

namespace exitpipe {
namespace {

using Clock = std::chrono::steady_clock;

// Collects failed checks; the first few end up in the criterion's detail line.
class Checks {
 public:
  void Expect(bool ok, const std::string &what) {
    ++count_;
    if (!ok) {
      failures_.push_back(what);
    }
  }
  bool ok() const { return failures_.empty(); }
  std::size_t count() const { return count_; }

  CriterionResult Finish(int id, const std::string &name, Clock::time_point start, const std::string &summary) const {
    CriterionResult r;
    r.id = id;
    r.name = name;
    r.passed = ok();
    r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    if (ok()) {
      r.detail = summary;
    } else {
      r.detail = std::to_string(failures_.size()) + " of " + std::to_string(count_) + " checks failed; first: " +
                 failures_.front();
    }
    return r;
  }

 private:
  std::size_t count_ = 0;
  std::vector<std::string> failures_;
};

// Runs fn, turning a thrown Error into a failed check.
template <typename Fn>
void Guard(Checks &checks, const std::string &what, Fn &&fn) {
  try {
    fn();
  } catch (const std::exception &e) {
    checks.Expect(false, what + " threw: " + e.what());
  }
}

std::string Fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

double Norm(const std::vector<double> &v) {
  double s = 0.0;
  for (double x : v) {
    s += x * x;
  }
  return std::sqrt(s);
}

// Worst per-parameter ||a - b|| / ||b||; infinity when a misses a parameter.
double MaxRelativeError(const GradientMap &a, const GradientMap &b) {
  double worst = 0.0;
  for (const auto &[name, ref] : b) {
    const auto it = a.find(name);
    if (it == a.end() || it->second.size() != ref.size()) {
      return INFINITY;
    }
    std::vector<double> d(ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      d[i] = it->second[i] - ref[i];
    }
    const double scale = Norm(ref);
    worst = std::max(worst, scale == 0.0 ? Norm(d) : Norm(d) / scale);
  }
  return a.size() == b.size() ? worst : INFINITY;
}

TokenBatch RandomBatch(const ModelConfig &c, std::size_t batch, std::size_t seq, std::mt19937_64 &rng) {
  std::uniform_int_distribution<int> tok(0, static_cast<int>(c.vocab_size) - 1);
  TokenBatch b{batch, seq, {}, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) {
    b.inputs.push_back(tok(rng));
    b.targets.push_back(tok(rng));
  }
  return b;
}

ModelConfig TinyConfig(std::size_t layers, bool tied) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.vocab_size = 13;
  c.max_seq_len = 8;
  c.tie_embeddings = tied;
  return c;
}

// A partitioned transformer with random microbatches.
struct TransformerRig {
  TransformerRig(const ModelConfig &config, std::size_t stages, std::size_t count, std::uint64_t seed)
      : model(BuildModel(config, seed)), partition(Partition(config, stages)) {
    std::mt19937_64 rng(seed + 1);
    for (std::size_t i = 0; i < count; ++i) {
      batches.push_back(RandomBatch(config, 2, 4, rng));
    }
    std::vector<const StageProgram *> raw;
    for (const auto &layout : partition.stages) {
      programs.push_back(std::make_unique<TransformerStage>(config, layout, batches));
      raw.push_back(programs.back().get());
    }
    setups = MakeStageSetups(model, partition, raw);
  }

  CostModel Cost(std::size_t microbatches) const {
    const ModelConfig &c = model.config;
    const std::size_t P = partition.num_stages();
    CostModel cost;
    cost.num_stages = P;
    cost.num_microbatches = microbatches;
    for (const auto &s : partition.stages) {
      cost.early_exits.push_back(s.num_early_exits(c));
    }
    cost.memory = TransformerMemoryModel(c, batches[0].batch, batches[0].seq, c.num_layers / P);
    return cost;
  }

  EarlyExitModel model;
  StagePartition partition;
  std::vector<TokenBatch> batches;
  std::vector<std::unique_ptr<TransformerStage>> programs;
  std::vector<StageSetup> setups;
};

IterationOptions ModelOptions(const ModelConfig &c, bool deferred) {
  IterationOptions o;
  o.defer_exit_forward = deferred;
  o.weights = c.loss_weights();
  return o;
}

const Event *FindEvent(const Timeline &t, std::size_t stage, ActionKind kind, std::size_t mb) {
  for (const Event &e : t.events[stage]) {
    if (e.kind == kind && e.mb == mb) {
      return &e;
    }
  }
  return nullptr;
}

// Summed durations of one action kind of one microbatch over stages 0..P-2.
double NonLastDuration(const Timeline &t, ActionKind kind, std::size_t mb) {
  double total = 0.0;
  for (std::size_t r = 0; r + 1 < t.num_stages; ++r) {
    const Event *e = FindEvent(t, r, kind, mb);
    total += e == nullptr ? NAN : e->end - e->start;
  }
  return total;
}

CostModel PresetWithExits(std::vector<std::size_t> exits) {
  CostModel c = CostModel::ReferencePreset();
  c.early_exits = std::move(exits);
  return c;
}

std::string Where(std::size_t P, std::size_t M) { return "P=" + std::to_string(P) + " M=" + std::to_string(M); }

}  // namespace

std::string FormatCriterion(const CriterionResult &r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s %d %s (%.1f s): ", r.passed ? "PASS" : "FAIL", r.id, r.name.c_str(), r.seconds);
  return buf + r.detail;
}

std::string CriterionJson(const CriterionResult &r) {
  nlohmann::ordered_json j;
  j["criterion"] = r.id;
  j["name"] = r.name;
  j["passed"] = r.passed;
  j["detail"] = r.detail;
  return j.dump();
}

CriterionResult CheckGradientEquivalence(std::size_t max_stages, std::size_t configs, std::uint64_t seed) {
  const auto start = Clock::now();
  Checks checks;
  std::mt19937_64 rng(seed);
  const std::size_t stage_choices = std::clamp<std::size_t>(max_stages, 1, 4);
  const HeadKind kinds[] = {HeadKind::kMinimalistic, HeadKind::kNormEmbed, HeadKind::kMlpEmbed, HeadKind::kLayerEmbed};
  double worst = 0.0;
  std::size_t bitwise = 0;
  for (std::size_t i = 0; i < configs; ++i) {
    const std::size_t P = 1 + i % stage_choices;
    const bool tied = (i / stage_choices) % 2 == 1;
    std::vector<std::size_t> depths;
    for (std::size_t L = 4; L <= 8; ++L) {
      if (L % P == 0) {
        depths.push_back(L);
      }
    }
    const std::size_t L = depths[rng() % depths.size()];
    ModelConfig c = TinyConfig(L, tied);
    const std::size_t k = rng() % 4;
    std::vector<std::size_t> layers;
    if (k > 0 && i % 3 == 0) {
      layers.push_back(0);  // before the first transformer layer
    }
    std::uniform_int_distribution<std::size_t> layer(1, L - 1);
    while (layers.size() < k) {
      const std::size_t l = layer(rng);
      if (std::find(layers.begin(), layers.end(), l) == layers.end()) {
        layers.push_back(l);
      }
    }
    std::sort(layers.begin(), layers.end());
    std::uniform_real_distribution<double> weight(0.1, 1.0);
    for (std::size_t l : layers) {
      c.exits.push_back({l, kinds[rng() % 4], weight(rng)});
    }
    c.final_loss_weight = weight(rng);
    const std::size_t M = 1 + rng() % (2 * P + 1);
    const bool deferred = i % 2 == 0;
    const std::string where = Where(P, M) + " L=" + std::to_string(L) + (tied ? " tied" : " untied") +
                              " exits=" + FormatExitList(c.exits);
    Guard(checks, where, [&] {
      TransformerRig rig(c, P, M, seed + 100 + i);
      PipelineEngine engine(P);
      const IterationResult got = engine.Run(rig.setups, BuildSchedule(P, M), ModelOptions(c, deferred));
      const GradientResult want = SingleDeviceGradients(rig.model, rig.batches, c.loss_weights());
      if (P == 1) {
        checks.Expect(got.grads == want.grads, where + ": single stage differs from the oracle bitwise");
        ++bitwise;
      } else {
        const double err = MaxRelativeError(got.grads, want.grads);
        worst = std::max(worst, err);
        checks.Expect(err <= 1e-9, where + ": relative error " + Fmt(err));
      }
    });
  }
  return checks.Finish(1, "gradient-equivalence", start,
                       std::to_string(configs) + " configs, worst relative error " + Fmt(worst) + ", " +
                           std::to_string(bitwise) + " single-stage configs bitwise equal");
}

CriterionResult CheckFiniteDifferences(std::size_t trials, std::uint64_t seed) {
  const auto start = Clock::now();
  Checks checks;
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (OpKind kind : kAllOpKinds) {
    for (std::size_t t = 0; t < trials; ++t) {
      Guard(checks, "op " + std::to_string(static_cast<int>(kind)), [&] {
        const double err = RandomOpGradientError(kind, rng);
        worst = std::max(worst, err);
        checks.Expect(err < 1e-6, "op kind " + std::to_string(static_cast<int>(kind)) + " trial " +
                                      std::to_string(t) + ": relative error " + Fmt(err));
      });
    }
  }
  return checks.Finish(2, "finite-differences", start,
                       std::to_string(std::size(kAllOpKinds)) + " op kinds x " + std::to_string(trials) +
                           " trials, worst relative error " + Fmt(worst));
}

CriterionResult CheckScheduleIdentities(std::uint64_t seed) {
  const auto start = Clock::now();
  Checks checks;
  Guard(checks, "reference preset", [&] {
    const Timeline standard = Simulate(CostModel::ReferencePreset(), ExitMode::kStandard);
    const std::vector<std::vector<std::size_t>> placements = {
        {0, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {1, 0, 0, 0}, {0, 1, 1, 0}, {1, 1, 1, 0}};
    for (const auto &p : placements) {
      const CostModel c = PresetWithExits(p);
      const std::size_t k = c.non_last_exits();
      const std::string where = "k=" + std::to_string(k) + " placement " + std::to_string(p[0]) +
                                std::to_string(p[1]) + std::to_string(p[2]) + std::to_string(p[3]);
      const double kd = static_cast<double>(k);
      const Timeline eager = Simulate(c, ExitMode::kEager);
      const Timeline deferred = Simulate(c, ExitMode::kDeferred);
      const Timeline reordered = Simulate(c, ExitMode::kDeferredReordered);
      checks.Expect(eager.span - standard.span == kd * (c.f_ee + c.b_ee), where + ": eager overhead " +
                                                                              Fmt(eager.span - standard.span));
      checks.Expect(deferred.span - standard.span == kd * (c.f_ee + c.b_ee),
                    where + ": deferred overhead " + Fmt(deferred.span - standard.span));
      // Deferred mode: the whole overhead shows up in the cool-down backwards of the last
      // microbatch, none in the warm-up forwards of the first.
      const std::size_t last = standard.schedule.num_regular - 1;
      checks.Expect(NonLastDuration(deferred, ActionKind::kForward, 0) ==
                        NonLastDuration(standard, ActionKind::kForward, 0),
                    where + ": deferred warm-up changed");
      checks.Expect(NonLastDuration(deferred, ActionKind::kBackward, last) -
                            NonLastDuration(standard, ActionKind::kBackward, last) ==
                        kd * (c.f_ee + c.b_ee),
                    where + ": deferred cool-down overhead");
      checks.Expect(reordered.span - standard.span == kd * c.b_ee,
                    where + ": reordered overhead " + Fmt(reordered.span - standard.span));
      checks.Expect(FurtherOptimizedSpan(c, k).reordered == kd * c.b_ee, where + ": closed form");
    }
  });
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> t(0.5, 3.0);
  std::size_t cases = 0;
  for (std::size_t P = 1; P <= 3; ++P) {
    for (std::size_t M = 1; M <= 4; ++M) {
      for (int trial = 0; trial < 4; ++trial) {
        CostModel c;
        c.num_stages = P;
        c.num_microbatches = M;
        c.f = t(rng);
        c.b = t(rng);
        c.f_ee = t(rng);
        c.b_ee = t(rng);
        c.embed_forward = trial % 2 ? t(rng) : 0.0;
        c.hop_latency = trial >= 2 ? t(rng) / 4 : 0.0;
        for (std::size_t r = 0; r < P; ++r) {
          c.early_exits.push_back(rng() % 3);
        }
        for (ExitMode mode :
             {ExitMode::kStandard, ExitMode::kEager, ExitMode::kDeferred, ExitMode::kDeferredReordered}) {
          Guard(checks, Where(P, M), [&] {
            const double sim = Simulate(c, mode).span, brute = BruteForceSpan(c, mode);
            checks.Expect(std::abs(sim - brute) <= 1e-9 * brute,
                          Where(P, M) + " " + ExitModeName(mode) + ": simulated " + Fmt(sim) + " vs longest path " +
                              Fmt(brute));
            ++cases;
          });
        }
      }
    }
  }
  return checks.Finish(3, "schedule-identities", start,
                       "overheads k(f_ee+b_ee) and k*b_ee exact for k=0..3; " + std::to_string(cases) +
                           " brute-force cases agree");
}

CriterionResult CheckMemoryIdentities(std::size_t max_stages, std::uint64_t seed) {
  const auto start = Clock::now();
  Checks checks;
  Guard(checks, "simulated logits", [&] {
    const std::size_t P = 4;
    for (std::size_t stage = 0; stage + 1 < P; ++stage) {
      std::vector<std::size_t> exits(P, 0);
      exits[stage] = 1;
      const CostModel c = PresetWithExits(exits);
      const double sbv = c.memory.LogitUnits();
      const std::size_t i = stage + 1;
      const std::string where = "exit on stage " + std::to_string(i);
      checks.Expect(Simulate(c, ExitMode::kEager).peak_exit_logits[stage] == sbv * static_cast<double>(P - i + 1),
                    where + ": eager logits");
      checks.Expect(Simulate(c, ExitMode::kDeferred).peak_exit_logits[stage] == sbv, where + ": deferred logits");
    }
  });
  Guard(checks, "peak memory", [&] {
    CostModel c = CostModel::ReferencePreset();
    const double vh = static_cast<double>(c.memory.vocab * c.memory.hidden);
    const double layer = 12.0 * static_cast<double>(c.memory.hidden * c.memory.hidden);
    c.early_exits = {0, 0, 0, 0};
    c.param_units = {vh + 2 * layer, 2 * layer, 2 * layer, 2 * layer + vh};
    const double standard = Simulate(c, ExitMode::kStandard).max_peak_memory();
    c.early_exits = {0, 1, 1, 0};
    c.param_units = {vh + 2 * layer, 2 * layer + vh, 2 * layer + vh, 2 * layer + vh};
    checks.Expect(Simulate(c, ExitMode::kDeferred).max_peak_memory() == standard,
                  "deferred middle exits changed the peak memory");
    c.early_exits = {1, 1, 1, 0};
    c.param_units[0] += vh;
    checks.Expect(Simulate(c, ExitMode::kDeferred).peak_memory[0] > standard, "exit on stage 1 did not add memory");
  });
  const std::size_t P = std::clamp<std::size_t>(max_stages, 1, 4);
  if (P >= 2) {
    Guard(checks, "executed logits", [&] {
      ModelConfig c = TinyConfig(P, false);
      for (std::size_t l = 0; l < P; ++l) {
        c.exits.push_back({l, HeadKind::kMinimalistic, 0.5});
      }
      const std::size_t M = 2 * P;
      TransformerRig rig(c, P, M, seed);
      PipelineEngine engine(P);
      const IterationResult eager = engine.Run(rig.setups, BuildSchedule(P, M), ModelOptions(c, false));
      const IterationResult deferred = engine.Run(rig.setups, BuildSchedule(P, M), ModelOptions(c, true));
      const MemoryModel mem = TransformerMemoryModel(c, 2, 4, 1);
      const double sbv = mem.LogitUnits(), act = mem.StageActivationUnits();
      for (std::size_t r = 0; r + 1 < P; ++r) {
        const double in_flight = static_cast<double>(P - r);
        checks.Expect(eager.report.peak_activation[r] == in_flight * (act + sbv),
                      "executed eager peak on stage " + std::to_string(r + 1));
        checks.Expect(deferred.report.peak_activation[r] == in_flight * act + sbv,
                      "executed deferred peak on stage " + std::to_string(r + 1));
      }
    });
  }
  std::size_t replays = 0;
  Guard(checks, "replay", [&] {
    const std::size_t L = P == 3 ? 6 : 4;
    ModelConfig c = TinyConfig(L, false);
    c.exits = {{0, HeadKind::kMinimalistic, 0.5}, {1, HeadKind::kNormEmbed, 0.5}, {2, HeadKind::kMlpEmbed, 0.5}};
    const std::size_t M = std::max<std::size_t>(P, 5);
    std::vector<FillPlan> plans{FillPlan{}};
    if (P >= 2) {
      std::vector<bool> has(P, false);
      for (std::size_t j = 0; j < c.exits.size(); ++j) {
        has[StageOfExit(c, P, j)] = true;
      }
      has[P - 1] = true;
      plans.push_back(RestrictPart1ToExits(PlanBubbleFill(P, 0.5), has));
    }
    for (const FillPlan &plan : plans) {
      const PipelineSchedule schedule = BuildSchedule(P, M, plan);
      TransformerRig rig(c, P, schedule.routes.size(), seed + 7);
      PipelineEngine engine(P);
      for (bool deferred : {false, true}) {
        const IterationResult got = engine.Run(rig.setups, schedule, ModelOptions(c, deferred));
        const Timeline sim = Simulate(rig.Cost(M), deferred ? ExitMode::kDeferred : ExitMode::kEager, plan);
        const auto diffs = VerifyAgainstReplay(sim, got.trace);
        checks.Expect(diffs.empty(), "replay " + Where(P, M) + (plan.empty() ? "" : " filled") + ": " +
                                         (diffs.empty() ? "" : diffs.front()));
        ++replays;
      }
    }
  });
  return checks.Finish(4, "memory-identities", start,
                       "logit units s*b*V*(P-i+1) eager and s*b*V deferred; peak unchanged with deferred middle exits; " +
                           std::to_string(replays) + " replays with zero discrepancies");
}

CriterionResult CheckBubbleFill() {
  const auto start = Clock::now();
  Checks checks;
  for (std::size_t P = 2; P <= 12; ++P) {
    for (double ratio : {0.1, 0.2, 0.25, 1.0 / 3.0, 0.5, 2.0 / 3.0, 0.75, 1.0, 1.5, 2.0, 3.0}) {
      const FillPlan plan = PlanBubbleFill(P, ratio);
      const std::string where = "P=" + std::to_string(P) + " f/b=" + Fmt(ratio);
      const auto K = static_cast<std::size_t>(std::floor(static_cast<double>(P - 1) / (ratio + 1.0) + 1e-12));
      checks.Expect(plan.k_part1() == K && plan.k_part2() == K, where + ": K");
      for (std::size_t i = 1; i <= std::min(K, plan.k_part2()); ++i) {
        const double depth = std::floor(static_cast<double>(P) - static_cast<double>(i) * (ratio + 1.0) + 1e-12);
        checks.Expect(plan.part2_backward_depth[i - 1] == static_cast<std::size_t>(depth),
                      where + ": depth of Part 2 microbatch " + std::to_string(i));
      }
    }
  }
  for (std::size_t P = 2; P <= 10; ++P) {
    for (double f : {0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0}) {
      const double b = 2.0;
      const std::string where = "P=" + std::to_string(P) + " f=" + Fmt(f);
      Guard(checks, where, [&] {
        const BubbleGeometry g = MeasureBubbles(P, f, b);
        const FillPlan plan = PlanBubbleFill(P, f / b);
        checks.Expect(g.k_part1 == plan.k_part1() && g.k_part2 == plan.k_part2(), where + ": measured K");
        checks.Expect(g.part2_depths == plan.part2_backward_depth, where + ": measured depths");
      });
    }
  }
  std::size_t spans = 0;
  for (std::size_t P = 2; P <= 8; ++P) {
    for (std::size_t M = P; M <= 2 * P + 1; M += 2) {
      for (double f : {0.4, 1.0, 2.0, 4.0}) {
        for (ExitMode mode : {ExitMode::kStandard, ExitMode::kDeferred}) {
          CostModel c;
          c.num_stages = P;
          c.num_microbatches = M;
          c.f = f;
          c.b = 4.0;
          // Negligible heads keep the stages uniform, as the closed-form plan assumes.
          c.f_ee = c.b_ee = 1e-9;
          c.early_exits.assign(P, 0);
          if (mode != ExitMode::kStandard && P / 2 + 1 < P) {
            c.early_exits[P / 2] = 1;
          }
          std::vector<bool> has(P);
          for (std::size_t r = 0; r < P; ++r) {
            has[r] = c.early_exits[r] > 0 || r + 1 == P;
          }
          const std::string where = Where(P, M) + " f=" + Fmt(f) + " " + ExitModeName(mode);
          Guard(checks, where, [&] {
            const FillPlan plan = RestrictPart1ToExits(PlanBubbleFill(P, c.f / c.b), has);
            const double plain = Simulate(c, mode).span, filled = Simulate(c, mode, plan).span;
            checks.Expect(filled <= plain + 1e-6, where + ": filled span " + Fmt(filled) + " > " + Fmt(plain));
            ++spans;
          });
        }
      }
    }
  }
  return checks.Finish(5, "bubble-fill", start,
                       "closed forms match the measured bubbles; " + std::to_string(spans) +
                           " filled schedules no longer than unfilled");
}

CriterionResult CheckEstimator(std::size_t trials, std::size_t fill_iterations, double rescale_bias,
                               std::uint64_t seed) {
  const auto start = Clock::now();
  Checks checks;
  struct Case {
    const char *name;
    EstimatorSpec spec;
  };
  const Case cases[] = {{"independent", {0.3, -0.2, 1.0, 1.0, 0.0}},
                        {"cov=-var/2", {0.0, 0.0, 2.0, 1.5, -1.0}},
                        {"negative cov", {0.0, 1.0, 1.0, 1.0, -1.0}}};
  std::string stats;
  for (std::size_t i = 0; i < std::size(cases); ++i) {
    const Case &c = cases[i];
    Guard(checks, c.name, [&] {
      const EstimatorStats s = EstimateStats(c.spec, trials, 4, seed + i);
      const std::string where = c.name;
      checks.Expect(std::abs(s.bias) <= 3.0 * s.bias_se, where + ": plain estimator biased");
      checks.Expect(std::abs(s.bias_plus) <= 3.0 * s.bias_plus_se, where + ": filled estimator biased");
      checks.Expect(std::abs(s.difference - s.predicted_difference) <= 3.0 * s.difference_se,
                    where + ": variance difference " + Fmt(s.difference) + " vs " + Fmt(s.predicted_difference));
      if (i == 2) {
        checks.Expect(s.predicted_difference < 0.0 && s.var_plus > s.var, where + ": variance did not increase");
      }
      stats += std::string(stats.empty() ? "" : ", ") + c.name + " " + Fmt(s.difference) + " vs " +
               Fmt(s.predicted_difference);
    });
  }

  // Filled against plain iterations on the same samples: the mean difference must vanish.
  std::size_t coords = 0;
  Guard(checks, "linear toy", [&] {
    const std::size_t P = 4, B = 4;
    const FillPlan plan = RestrictPart1ToExits(PlanBubbleFill(P, 0.5), {true, true, false, false});
    const PipelineSchedule filled = BuildSchedule(P, B, plan), plain = BuildSchedule(P, B);
    const LinearToy toy = MakeLinearToy(P, 2, 1, {true, true, false, true}, 99);
    PipelineEngine engine(P);
    std::mt19937_64 rng(seed + 10);
    IterationOptions options;
    options.weights.assign(toy.num_exits(), 1.0);
    options.stage_factor_bias = rescale_bias;
    std::map<std::string, std::vector<std::pair<double, double>>> sums;  // sum, sum of squares
    for (std::size_t it = 0; it < fill_iterations; ++it) {
      const std::vector<LinearSample> samples = DrawLinearSamples(toy, filled.routes.size(), rng);
      std::vector<std::unique_ptr<LinearToyStage>> programs;
      std::vector<StageSetup> setups;
      for (std::size_t r = 0; r < P; ++r) {
        programs.push_back(std::make_unique<LinearToyStage>(toy, r, samples));
        setups.push_back({programs.back().get(), LinearToyStageParams(toy, r), {}});
      }
      const IterationResult f = engine.Run(setups, filled, options);
      const IterationResult p = engine.Run(setups, plain, options);
      for (const auto &[name, g] : f.grads) {
        auto &acc = sums[name];
        acc.resize(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double d = g[i] - p.grads.at(name)[i];
          acc[i].first += d;
          acc[i].second += d * d;
        }
      }
    }
    const double n = static_cast<double>(fill_iterations);
    for (const auto &[name, acc] : sums) {
      for (std::size_t i = 0; i < acc.size(); ++i) {
        const double mean = acc[i].first / n;
        const double var = (acc[i].second - acc[i].first * acc[i].first / n) / (n - 1.0);
        const double se = std::sqrt(std::max(var, 0.0) / n);
        if (se == 0.0 && mean == 0.0) {
          continue;  // coordinate untouched by the fill microbatches
        }
        ++coords;
        checks.Expect(std::abs(mean) <= 3.0 * se, name + "[" + std::to_string(i) + "]: filled minus plain " +
                                                      Fmt(mean) + " exceeds 3 standard errors " + Fmt(3.0 * se));
      }
    }
  });
  return checks.Finish(6, "estimator-statistics", start,
                       "variance differences " + stats + "; " + std::to_string(fill_iterations) +
                           " filled iterations unbiased on " + std::to_string(coords) + " affected coordinates");
}

CriterionResult CheckInference(const EarlyExitModel &model, const std::vector<int> &corpus_tokens,
                               const InferenceCheck &check) {
  const auto start = Clock::now();
  Checks checks;
  const std::size_t P = check.num_stages;
  std::mt19937_64 rng(check.seed);
  std::vector<std::vector<int>> prompts;
  std::uniform_int_distribution<std::size_t> offset(0, corpus_tokens.size() - check.prompt_length);
  for (std::size_t i = 0; i < check.prompts; ++i) {
    const std::size_t at = offset(rng);
    prompts.emplace_back(corpus_tokens.begin() + static_cast<std::ptrdiff_t>(at),
                         corpus_tokens.begin() + static_cast<std::ptrdiff_t>(at + check.prompt_length));
  }
  GenerateOptions options;
  options.num_stages = P;
  options.max_new_tokens = check.max_new_tokens;
  options.max_deferred = check.max_deferred;
  std::string summary;
  Guard(checks, "modes", [&] {
    for (const ModeComparison &m : CompareModes(model, prompts, check.thresholds, options)) {
      const std::string where = "threshold " + Fmt(m.threshold);
      checks.Expect(m.divergences == 0, where + ": " + (m.divergence_details.empty() ? "" : m.divergence_details[0]));
      checks.Expect(m.confidences_equal, where + ": confidences differ between modes");
      if (m.threshold == 1.0) {
        checks.Expect(m.pipeline_speedup == 1.0 && m.recompute_speedup == 1.0, where + ": baseline speedup not 1");
      }
      summary += (summary.empty() ? "" : ", ") + Fmt(m.threshold) + ": " + std::to_string(m.early_exits) + "/" +
                 std::to_string(m.tokens) + " early, speedup " + Fmt(m.pipeline_speedup);
    }
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const std::string where = "prompt " + std::to_string(i);
      const std::vector<int> greedy = GenerateMonolithic(model, prompts[i], check.max_new_tokens);
      for (double th : check.thresholds) {
        options.threshold = th;
        const GenerationTrace a = GeneratePipeline(model, prompts[i], options);
        const GenerationTrace b = GenerateRecompute(model, prompts[i], options);
        checks.Expect(a.kv_complete && b.kv_complete, where + ": KV mask incomplete at threshold " + Fmt(th));
        if (th == 1.0) {
          checks.Expect(a.token_ids() == greedy && b.token_ids() == greedy, where + ": differs from greedy decoding");
        }
        const double full = static_cast<double>(model.config.num_layers);
        for (const TokenRecord &r : a.tokens) {
          checks.Expect(full / r.latency <= static_cast<double>(P) + 1e-12, where + ": per-token speedup above P");
        }
      }
    }
  });
  Guard(checks, "synthetic trace", [&] {
    const InferenceLatency l = ModelInferenceLatency(std::vector<std::size_t>(1000, 1), std::vector<double>(P, 1.0));
    for (double s : l.PerTokenSpeedup()) {
      checks.Expect(s <= static_cast<double>(P) + 1e-12, "synthetic per-token speedup above P");
    }
    checks.Expect(std::abs(l.PerTokenSpeedup().back() - static_cast<double>(P)) < 1e-12 &&
                      l.TotalSpeedup() > 0.99 * static_cast<double>(P),
                  "all-first-stage trace speedup " + Fmt(l.TotalSpeedup()) + " does not approach P");
  });
  return checks.Finish(7, "inference-equivalence", start,
                       std::to_string(prompts.size()) + " prompts, modes identical, greedy at 1.0, KV complete; " +
                           summary);
}

bool ConvergenceHolds(const TrainingCurve &curve, std::size_t block, double slack, std::string *detail) {
  const std::size_t steps = curve.losses.size();
  if (block == 0 || steps < 2 * block) {
    *detail = "need at least two blocks of " + std::to_string(block) + " steps, got " + std::to_string(steps);
    return false;
  }
  const std::size_t exits = curve.losses[0].size(), blocks = steps / block;
  std::vector<std::vector<double>> means(exits, std::vector<double>(blocks, 0.0));
  for (std::size_t k = 0; k < blocks; ++k) {
    for (std::size_t s = k * block; s < (k + 1) * block; ++s) {
      for (std::size_t j = 0; j < exits; ++j) {
        means[j][k] += curve.losses[s][j] / static_cast<double>(block);
      }
    }
  }
  std::string text;
  bool ok = true;
  for (std::size_t j = 0; j < exits; ++j) {
    text += (j ? "; exit " : "exit ") + std::to_string(j) + ":";
    for (std::size_t k = 0; k < blocks; ++k) {
      text += " " + Fmt(means[j][k]);
      if (k > 0 && !(means[j][k] < means[j][k - 1])) {
        ok = false;
      }
    }
    if (j + 1 < exits && means[j].back() < means[exits - 1].back() - slack) {
      ok = false;
      text += " (below final)";
    }
  }
  *detail = text;
  return ok;
}

CriterionResult CheckConvergence(const RunConfig &config, EarlyExitModel *trained) {
  const auto start = Clock::now();
  Checks checks;
  std::string detail;
  Guard(checks, "training", [&] {
    const TokenCorpus corpus = MakeCorpus(config);
    Trainer trainer(BuildModel(config.model, config.seed), corpus, MakeTrainerOptions(config));
    TrainingCurve curve;
    for (std::size_t s = 0; s < config.steps; ++s) {
      curve.losses.push_back(trainer.Step().exit_losses);
    }
    checks.Expect(ConvergenceHolds(curve, 100, 0.05, &detail), "100-step block means: " + detail);
    if (trained != nullptr) {
      *trained = trainer.model();
    }
  });
  return checks.Finish(8, "convergence", start, std::to_string(config.steps) + " steps, 100-step means " + detail);
}

std::vector<CriterionResult> RunAllCriteria(const RunConfig &config,
                                            const std::function<void(const CriterionResult &)> &on_result) {
  std::vector<CriterionResult> out;
  auto emit = [&](CriterionResult r) {
    if (on_result) {
      on_result(r);
    }
    out.push_back(std::move(r));
  };
  const std::size_t P = config.num_stages;
  const std::uint64_t seed = config.seed;
  emit(CheckGradientEquivalence(P, 24, seed));
  emit(CheckFiniteDifferences(100, seed));
  emit(CheckScheduleIdentities(seed));
  emit(CheckMemoryIdentities(P, seed));
  emit(CheckBubbleFill());
  emit(CheckEstimator(1000000, 10000, config.rescale_bias, seed));

  EarlyExitModel trained;
  CriterionResult convergence = CheckConvergence(config, &trained);
  InferenceCheck check;
  check.num_stages = P;
  check.prompts = config.verify_prompts;
  check.max_new_tokens = config.max_new_tokens;
  check.max_deferred = config.max_deferred;
  check.thresholds = config.thresholds;
  check.seed = seed;
  const TokenCorpus corpus = MakeCorpus(config);
  if (!config.checkpoint.empty()) {
    emit(CheckInference(LoadCheckpoint(config.checkpoint).model, corpus.tokens(), check));
  } else if (!trained.params.empty()) {
    emit(CheckInference(trained, corpus.tokens(), check));
  } else {
    CriterionResult r{7, "inference-equivalence", false, "no trained model: " + convergence.detail, 0.0};
    emit(r);
  }
  emit(std::move(convergence));
  return out;
}

}  // namespace exitpipe
