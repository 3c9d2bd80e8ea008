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

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

#include <gtest/gtest.h>

#include "exitpipe/error.h"
#include "exitpipe/model/model.h"
#include "exitpipe/model/partition.h"
#include "exitpipe/pipeline/channel.h"
#include "exitpipe/pipeline/engine.h"
#include "exitpipe/pipeline/linear_toy.h"
#include "exitpipe/pipeline/stage.h"
#include "exitpipe/schedule/plan.h"
#include "exitpipe/schedule/simulator.h"
#include "exitpipe/tensor/ops.h"

namespace exitpipe {
namespace {

ErrorKind KindOf(const std::function<void()> &fn) {
  try {
    fn();
  } catch (const Error &e) {
    return e.kind();
  }
  return ErrorKind::kInternal;
}

ModelConfig SmallConfig(std::size_t layers, bool tied) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.vocab_size = 13;
  c.max_seq_len = 5;
  c.tie_embeddings = tied;
  return c;
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

// A partitioned transformer with one program per stage over a fixed set of microbatches.
struct Rig {
  Rig(const ModelConfig &config, std::size_t stages, std::size_t count, std::uint64_t seed)
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

  std::span<const TokenBatch> regular(std::size_t m) const { return std::span(batches).first(m); }

  EarlyExitModel model;
  StagePartition partition;
  std::vector<TokenBatch> batches;
  std::vector<std::unique_ptr<TransformerStage>> programs;
  std::vector<StageSetup> setups;
};

IterationOptions Options(const ModelConfig &c, bool deferred) {
  IterationOptions o;
  o.defer_exit_forward = deferred;
  o.weights = c.loss_weights();
  return o;
}

double Norm(const std::vector<double> &v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Worst per-parameter relative error ||a - b|| / ||b||.
double MaxRelativeError(const GradientMap &a, const GradientMap &b) {
  EXPECT_EQ(a.size(), b.size());
  double worst = 0.0;
  for (const auto &[name, ref] : b) {
    const auto it = a.find(name);
    if (it == a.end()) {
      ADD_FAILURE() << "missing gradient for " << name;
      continue;
    }
    std::vector<double> d(ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) d[i] = it->second[i] - ref[i];
    const double scale = Norm(ref);
    worst = std::max(worst, scale == 0.0 ? Norm(d) : Norm(d) / scale);
  }
  return worst;
}

CostModel ReplayCost(const Rig &rig, std::size_t microbatches) {
  const ModelConfig &c = rig.model.config;
  const std::size_t P = rig.partition.num_stages();
  CostModel cost;
  cost.num_stages = P;
  cost.num_microbatches = microbatches;
  cost.early_exits.clear();
  for (const auto &s : rig.partition.stages) cost.early_exits.push_back(s.num_early_exits(c));
  cost.memory = TransformerMemoryModel(c, rig.batches[0].batch, rig.batches[0].seq, c.num_layers / P);
  return cost;
}

TEST(PipelineTest, SingleStageIsBitwiseSingleDevice) {
  for (bool tied : {false, true}) {
    for (bool deferred : {false, true}) {
      ModelConfig c = SmallConfig(2, tied);
      c.exits = {{0, HeadKind::kNormEmbed, 0.3}, {1, HeadKind::kMlpEmbed, 0.6}};
      Rig rig(c, 1, 3, 5);
      PipelineEngine engine(1);
      const IterationResult got = engine.Run(rig.setups, BuildSchedule(1, 3), Options(c, deferred));
      const GradientResult want = SingleDeviceGradients(rig.model, rig.regular(3), c.loss_weights());
      ASSERT_EQ(got.grads.size(), want.grads.size());
      for (const auto &[name, g] : want.grads) {
        EXPECT_EQ(got.grads.at(name), g) << name << (tied ? " tied" : "") << (deferred ? " deferred" : "");
      }
    }
  }
}

TEST(PipelineTest, FourStagesSixMicrobatchesMatchOracle) {
  ModelConfig c = SmallConfig(4, false);
  c.exits = {{1, HeadKind::kMinimalistic, 0.25}, {2, HeadKind::kNormEmbed, 0.5}};
  Rig rig(c, 4, 6, 11);
  PipelineEngine engine(4);
  const IterationResult got = engine.Run(rig.setups, BuildSchedule(4, 6), Options(c, false));
  const GradientResult want = SingleDeviceGradients(rig.model, rig.regular(6), c.loss_weights());
  EXPECT_LE(MaxRelativeError(got.grads, want.grads), 1e-9);
  for (std::size_t j = 0; j < c.num_exits(); ++j) {
    EXPECT_NEAR(got.report.exit_losses[j], want.exit_losses[j], 1e-12);
  }
}

TEST(PipelineTest, GradientEquivalenceOverRandomConfigs) {
  std::mt19937_64 rng(2024);
  const HeadKind kinds[] = {HeadKind::kMinimalistic, HeadKind::kNormEmbed, HeadKind::kMlpEmbed, HeadKind::kLayerEmbed};
  for (std::size_t P : {2, 3, 4}) {
    for (bool tied : {false, true}) {
      for (int trial = 0; trial < 3; ++trial) {
        const std::size_t L = 2 * P;
        ModelConfig c = SmallConfig(L, tied);
        std::vector<std::size_t> layers{0};  // an exit reading the embedding output
        std::uniform_int_distribution<std::size_t> layer(1, L - 1);
        for (int k = 0; k < trial + 1; ++k) layers.push_back(layer(rng));
        std::sort(layers.begin(), layers.end());
        layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
        std::uniform_real_distribution<double> weight(0.1, 1.0);
        for (std::size_t l : layers) c.exits.push_back({l, kinds[rng() % 4], weight(rng)});
        c.final_loss_weight = weight(rng);
        const std::size_t M = P + static_cast<std::size_t>(trial);
        Rig rig(c, P, M, 100 + trial);
        PipelineEngine engine(P);
        const GradientResult want = SingleDeviceGradients(rig.model, rig.regular(M), c.loss_weights());
        for (bool deferred : {false, true}) {
          const IterationResult got = engine.Run(rig.setups, BuildSchedule(P, M), Options(c, deferred));
          EXPECT_LE(MaxRelativeError(got.grads, want.grads), 1e-9)
              << "P=" << P << " tied=" << tied << " exits=" << FormatExitList(c.exits);
        }
      }
    }
  }
}

TEST(PipelineTest, EagerAndDeferredGiveIdenticalGradients) {
  ModelConfig c = SmallConfig(4, true);
  c.exits = {{1, HeadKind::kNormEmbed, 0.4}, {3, HeadKind::kMinimalistic, 0.7}};
  Rig rig(c, 4, 5, 3);
  PipelineEngine engine(4);
  const IterationResult eager = engine.Run(rig.setups, BuildSchedule(4, 5), Options(c, false));
  const IterationResult deferred = engine.Run(rig.setups, BuildSchedule(4, 5), Options(c, true));
  EXPECT_EQ(eager.grads, deferred.grads);
  EXPECT_EQ(eager.report.exit_losses, deferred.report.exit_losses);
  // Stage 1 holds an exit: eager keeps logits for every in-flight microbatch.
  EXPECT_GT(eager.report.peak_activation[1], deferred.report.peak_activation[1]);
  EXPECT_EQ(eager.report.peak_activation[2], deferred.report.peak_activation[2]);
}

TEST(PipelineTest, LogitMemoryFollowsInFlightCount) {
  ModelConfig c = SmallConfig(4, false);
  c.exits = {{0, HeadKind::kMinimalistic, 0.5}, {1, HeadKind::kMinimalistic, 0.5}, {2, HeadKind::kMinimalistic, 0.5},
             {3, HeadKind::kMinimalistic, 0.5}};
  const std::size_t P = 4, M = 8;
  Rig rig(c, P, M, 8);
  PipelineEngine engine(P);
  const IterationResult eager = engine.Run(rig.setups, BuildSchedule(P, M), Options(c, false));
  const IterationResult deferred = engine.Run(rig.setups, BuildSchedule(P, M), Options(c, true));
  const MemoryModel mem = TransformerMemoryModel(c, 2, 4, 1);
  const double sbv = mem.LogitUnits(), act = mem.StageActivationUnits();
  for (std::size_t r = 0; r + 1 < P; ++r) {
    const double in_flight = static_cast<double>(P - r);  // P - i + 1 with 1-based i
    EXPECT_EQ(eager.report.peak_activation[r], in_flight * (act + sbv)) << r;
    EXPECT_EQ(deferred.report.peak_activation[r], in_flight * act + sbv) << r;
  }
}

TEST(PipelineTest, InFlightBoundAndMessageCounts) {
  ModelConfig c = SmallConfig(4, false);
  c.exits = {{2, HeadKind::kNormEmbed, 0.5}};
  for (std::size_t M : {1, 3, 4, 9}) {
    Rig rig(c, 4, M, 21);
    PipelineEngine engine(4);
    const IterationResult got = engine.Run(rig.setups, BuildSchedule(4, M), Options(c, true));
    for (std::size_t r = 0; r < 4; ++r) {
      EXPECT_LE(got.report.peak_in_flight[r], 4 - r);
      EXPECT_EQ(got.report.peak_in_flight[r], std::min<std::size_t>(4 - r, M));
    }
    for (std::size_t r = 0; r < 3; ++r) {
      EXPECT_EQ(got.trace.activations_sent[r], M);
      EXPECT_EQ(got.trace.gradients_sent[r], M);
    }
    EXPECT_EQ(got.report.regular_microbatches, M);
  }
}

TEST(PipelineTest, ExecutionMatchesSimulatorReplay) {
  ModelConfig c = SmallConfig(4, false);
  c.exits = {{1, HeadKind::kMinimalistic, 0.5}, {2, HeadKind::kNormEmbed, 0.5}};
  const std::size_t P = 4, M = 6;
  Rig rig(c, P, M, 4);
  PipelineEngine engine(P);
  for (bool deferred : {false, true}) {
    const IterationResult got = engine.Run(rig.setups, BuildSchedule(P, M), Options(c, deferred));
    const Timeline sim = Simulate(ReplayCost(rig, M), deferred ? ExitMode::kDeferred : ExitMode::kEager);
    const auto diffs = VerifyAgainstReplay(sim, got.trace);
    EXPECT_TRUE(diffs.empty()) << (diffs.empty() ? "" : diffs.front());
  }
}

TEST(PipelineTest, FilledExecutionMatchesSimulatorReplay) {
  ModelConfig c = SmallConfig(4, false);
  c.exits = {{0, HeadKind::kMinimalistic, 0.5}, {1, HeadKind::kNormEmbed, 0.5}};
  const std::size_t P = 4, M = 5;
  const FillPlan plan = RestrictPart1ToExits(PlanBubbleFill(P, 0.5), {true, true, false, false});
  const PipelineSchedule s = BuildSchedule(P, M, plan);
  Rig rig(c, P, s.routes.size(), 6);
  PipelineEngine engine(P);
  for (bool deferred : {false, true}) {
    const IterationResult got = engine.Run(rig.setups, s, Options(c, deferred));
    const Timeline sim = Simulate(ReplayCost(rig, M), deferred ? ExitMode::kDeferred : ExitMode::kEager, plan);
    const auto diffs = VerifyAgainstReplay(sim, got.trace);
    EXPECT_TRUE(diffs.empty()) << (diffs.empty() ? "" : diffs.front());
    EXPECT_EQ(got.report.part1_microbatches, 2u);
    EXPECT_EQ(got.report.part2_microbatches, 2u);
  }
}

TEST(PipelineTest, PlainQueuesCarryIncreasingIds) {
  for (std::size_t P : {2, 3, 5}) {
    for (std::size_t M : {1, 4, 7}) {
      const PipelineSchedule s = BuildSchedule(P, M);
      for (std::size_t r = 0; r + 1 < P; ++r) {
        for (const auto &order : {s.ActivationOrder(r), s.GradientOrder(r)}) {
          ASSERT_EQ(order.size(), M);
          for (std::size_t i = 0; i < M; ++i) EXPECT_EQ(order[i], i);
        }
      }
    }
  }
}

TEST(PipelineTest, RepeatedRunsAreBitwiseIdentical) {
  ModelConfig c = SmallConfig(4, true);
  c.exits = {{1, HeadKind::kMlpEmbed, 0.5}};
  Rig rig(c, 2, 4, 13);
  PipelineEngine engine(2);
  const IterationResult a = engine.Run(rig.setups, BuildSchedule(2, 4), Options(c, true));
  for (int rep = 0; rep < 3; ++rep) {
    const IterationResult b = engine.Run(rig.setups, BuildSchedule(2, 4), Options(c, true));
    EXPECT_EQ(a.grads, b.grads);
    EXPECT_EQ(a.report.exit_losses, b.report.exit_losses);
    EXPECT_EQ(a.report.stage_grad_norms, b.report.stage_grad_norms);
    EXPECT_EQ(a.report.peak_activation, b.report.peak_activation);
    EXPECT_EQ(a.report.peak_in_flight, b.report.peak_in_flight);
  }
}

TEST(InboxTest, MatchesByIdAndRejectsOutOfOrderArrivals) {
  Channel<ActivationMessage> channel(8);
  Inbox<ActivationMessage> inbox(channel, {0, 3, 1}, std::chrono::milliseconds(100), "test");
  channel.Push({0, Tensor::Scalar(0.0)});
  channel.Push({3, Tensor::Scalar(3.0)});
  channel.Push({1, Tensor::Scalar(1.0)});
  EXPECT_EQ(inbox.Take(1).hidden.item(), 1.0);  // 0 and 3 wait in the stash
  EXPECT_EQ(inbox.Take(0).hidden.item(), 0.0);
  EXPECT_EQ(inbox.Take(3).hidden.item(), 3.0);

  Channel<ActivationMessage> swapped(8);
  Inbox<ActivationMessage> strict(swapped, {0, 1}, std::chrono::milliseconds(100), "test");
  swapped.Push({1, Tensor::Scalar(1.0)});
  EXPECT_EQ(KindOf([&] { strict.Take(1); }), ErrorKind::kProtocolViolation);

  Channel<ActivationMessage> closed(8);
  Inbox<ActivationMessage> waiting(closed, {0}, std::chrono::milliseconds(100), "test");
  closed.Close();
  EXPECT_EQ(KindOf([&] { waiting.Take(0); }), ErrorKind::kProtocolViolation);
}

TEST(PipelineTest, ScheduleViolationsAreReported) {
  ModelConfig c = SmallConfig(2, false);
  Rig rig(c, 2, 3, 2);
  PipelineEngine engine(2);
  // Stage 0 never runs microbatch 2 but stage 1 waits for it.
  PipelineSchedule missing = BuildSchedule(2, 3);
  std::erase_if(missing.actions[0], [](const Action &a) { return a.mb == 2; });
  EXPECT_EQ(KindOf([&] { engine.Run(rig.setups, missing, Options(c, false)); }), ErrorKind::kProtocolViolation);

  PipelineSchedule early_backward = BuildSchedule(2, 3);
  early_backward.actions[0].insert(early_backward.actions[0].begin(), {ActionKind::kBackward, 2});
  EXPECT_EQ(KindOf([&] { engine.Run(rig.setups, early_backward, Options(c, false)); }),
            ErrorKind::kProtocolViolation);

  // Each stage waits on the other.
  PipelineSchedule cycle = BuildSchedule(2, 1);
  cycle.actions[0] = {{ActionKind::kForward, 0}, {ActionKind::kBackward, 0}};
  cycle.actions[1] = {{ActionKind::kBackward, 0}, {ActionKind::kForward, 0}};
  IterationOptions quick = Options(c, false);
  quick.message_timeout = std::chrono::milliseconds(200);
  EXPECT_EQ(KindOf([&] { engine.Run(rig.setups, cycle, quick); }), ErrorKind::kProtocolViolation);

  // The engine stays usable afterwards.
  const IterationResult ok = engine.Run(rig.setups, BuildSchedule(2, 3), Options(c, false));
  EXPECT_EQ(ok.report.regular_microbatches, 3u);
}

TEST(PipelineTest, NonFiniteLossIsReported) {
  ModelConfig c = SmallConfig(2, false);
  Rig rig(c, 2, 2, 2);
  auto &head = rig.setups[1].params.at(OutputEmbeddingName(c, 0));
  head.mutable_data()[0] = std::nan("");
  PipelineEngine engine(2);
  EXPECT_EQ(KindOf([&] { engine.Run(rig.setups, BuildSchedule(2, 2), Options(c, false)); }), ErrorKind::kNonFinite);
}

TEST(PipelineTest, ZeroWeightExitsLeaveBackboneGradientsUnchanged) {
  ModelConfig plain = SmallConfig(4, false);
  ModelConfig muted = plain;
  muted.exits = {{1, HeadKind::kNormEmbed, 0.0}, {2, HeadKind::kMinimalistic, 0.0}};
  Rig a(plain, 4, 4, 31), b(muted, 4, 4, 31);
  PipelineEngine engine(4);
  const IterationResult ga = engine.Run(a.setups, BuildSchedule(4, 4), Options(plain, false));
  const IterationResult gb = engine.Run(b.setups, BuildSchedule(4, 4), Options(muted, false));
  for (const auto &[name, g] : ga.grads) {
    const auto &h = gb.grads.at(name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      EXPECT_NEAR(h[i], g[i], 1e-14 * (1.0 + std::abs(g[i]))) << name;
    }
  }
}

TEST(PipelineTest, TiedParametersWithFillAreRejected) {
  ModelConfig c = SmallConfig(4, true);
  c.exits = {{1, HeadKind::kMinimalistic, 0.5}};
  Rig rig(c, 4, 8, 1);
  PipelineEngine engine(4);
  const PipelineSchedule s = BuildSchedule(4, 4, PlanBubbleFill(4, 0.5));
  EXPECT_EQ(KindOf([&] { engine.Run(rig.setups, s, Options(c, false)); }), ErrorKind::kInvalidConfig);
}

TEST(PipelineTest, StageRequiresOneWeightPerExit) {
  ModelConfig c = SmallConfig(2, false);
  Rig rig(c, 2, 2, 1);
  PipelineEngine engine(2);
  IterationOptions o = Options(c, false);
  o.weights = {};
  EXPECT_EQ(KindOf([&] { engine.Run(rig.setups, BuildSchedule(2, 2), o); }), ErrorKind::kInvalidArgument);
  o.weights = {-1.0};
  EXPECT_EQ(KindOf([&] { engine.Run(rig.setups, BuildSchedule(2, 2), o); }), ErrorKind::kInvalidArgument);
}

// Auxiliary loss on the linear toy.

struct ToyRig {
  ToyRig(std::size_t stages, std::size_t dim, std::size_t rows, std::vector<bool> exits, std::size_t count,
         std::uint64_t seed)
      : toy(MakeLinearToy(stages, dim, rows, std::move(exits), seed)) {
    std::mt19937_64 rng(seed + 17);
    samples = DrawLinearSamples(toy, count, rng);
    for (std::size_t r = 0; r < stages; ++r) {
      programs.push_back(std::make_unique<LinearToyStage>(toy, r, samples));
      setups.push_back({programs.back().get(), LinearToyStageParams(toy, r), {}});
    }
  }
  LinearToy toy;
  std::vector<LinearSample> samples;
  std::vector<std::unique_ptr<LinearToyStage>> programs;
  std::vector<StageSetup> setups;
};

IterationOptions ToyOptions(const LinearToy &toy) {
  IterationOptions o;
  o.weights.assign(toy.num_exits(), 1.0);
  return o;
}

TEST(AuxLossTest, TwoStageScalarToyMatchesHandDerivative) {
  ToyRig rig(2, 1, 1, {true, true}, 1, 77);
  const double x = rig.samples[0].x[0], y1 = rig.samples[0].targets[0][0], y2 = rig.samples[0].targets[1][0];
  const double w1 = rig.toy.params.at("toy.W0")[0], a1 = rig.toy.params.at("toy.A0")[0];
  const double w2 = rig.toy.params.at("toy.W1")[0], a2 = rig.toy.params.at("toy.A1")[0];
  const double e1 = x * w1 * a1 - y1, e2 = x * w1 * w2 * a2 - y2;
  // d(L1 + L2)/dW1 and d(L1 + L2)/dA1 by hand.
  const double d_w1 = e1 * a1 * x + e2 * a2 * w2 * x;
  const double d_a1 = e1 * x * w1;
  PipelineEngine engine(2);
  const IterationResult got = engine.Run(rig.setups, BuildSchedule(2, 1), ToyOptions(rig.toy));
  EXPECT_NEAR(got.grads.at("toy.W0")[0], d_w1, 1e-12 * (1.0 + std::abs(d_w1)));
  EXPECT_NEAR(got.grads.at("toy.A0")[0], d_a1, 1e-12 * (1.0 + std::abs(d_a1)));
}

TEST(AuxLossTest, SingleStageAuxLossIsLocalLoss) {
  Tape tape;
  const Var l = tape.Leaf("l", Tensor::Scalar(2.5));
  const Var x = tape.Leaf("x", Tensor::Full({2, 2}, 1.0));
  EXPECT_EQ(AuxiliaryLoss(tape, l, x, nullptr), l);
  EXPECT_EQ(KindOf([&] { AuxiliaryLoss(tape, Var{}, x, nullptr); }), ErrorKind::kInvalidArgument);
  const Tensor wrong = Tensor::Full({3}, 1.0);
  EXPECT_EQ(KindOf([&] { AuxiliaryLoss(tape, l, x, &wrong); }), ErrorKind::kShapeMismatch);
}

TEST(AuxLossTest, MiddleStageWithoutExitsIsPassThrough) {
  ToyRig rig(3, 3, 2, {true, false, true}, 4, 9);
  PipelineEngine engine(3);
  const IterationResult got = engine.Run(rig.setups, BuildSchedule(3, 4), ToyOptions(rig.toy));
  const std::vector<double> w(rig.toy.num_exits(), 1.0);
  const GradientMap want = LinearToyGradients(rig.toy, rig.samples, w);
  EXPECT_LE(MaxRelativeError(got.grads, want), 1e-12);
}

TEST(AuxLossTest, LastStageSendsDerivativeOfItsLoss) {
  // Stage 1 of a two-stage toy whose only exit is the final one: g = dL2/dx1 = (x1 W A - y) (W A)^T.
  ToyRig rig(2, 2, 3, {false, true}, 1, 5);
  const LinearSample &s = rig.samples[0];
  Tape fwd;
  const Var h = ops::Matmul(fwd, fwd.Constant(s.x), fwd.Constant(rig.toy.params.at("toy.W0")));
  const Tensor &x_in = fwd.value(h);
  Tape stage;
  const ParameterMap params = LinearToyStageParams(rig.toy, 1);
  const ParamLookup p = LeafLookup(stage, params);
  const Var input = stage.Leaf(kInputLeaf, x_in);
  const StageForward out = rig.programs[1]->Forward(stage, p, 0, input);
  const Var loss = rig.programs[1]->Loss(stage, 0, 0, rig.programs[1]->Head(stage, p, 0, out.taps[0]));
  const GradientMap g = stage.Backward(AuxiliaryLoss(stage, loss, out.output, nullptr));
  const auto &W = rig.toy.params.at("toy.W1");
  const auto &A = rig.toy.params.at("toy.A1");
  const std::vector<double> wa{W[0] * A[0] + W[1] * A[1], W[2] * A[0] + W[3] * A[1]};
  for (std::size_t i = 0; i < 3; ++i) {
    const double e = x_in[i * 2] * wa[0] + x_in[i * 2 + 1] * wa[1] - s.targets[0][i];
    EXPECT_NEAR(g.at(kInputLeaf)[i * 2], e * wa[0], 1e-12);
    EXPECT_NEAR(g.at(kInputLeaf)[i * 2 + 1], e * wa[1], 1e-12);
  }
}

TEST(AuxLossTest, PerturbingReceivedGradientShiftsLinearly) {
  ToyRig rig(2, 2, 2, {true, true}, 1, 6);
  const Tensor g = Tensor({2, 2}, {0.3, -0.2, 0.5, 0.1});
  const Tensor delta = Tensor({2, 2}, {-0.7, 0.4, 0.2, 0.9});
  Tensor g_plus = g;
  for (std::size_t i = 0; i < 4; ++i) g_plus.mutable_data()[i] += delta[i];
  auto run = [&](const Tensor *received, bool with_local) {
    Tape tape;
    const ParameterMap params = LinearToyStageParams(rig.toy, 0);
    const ParamLookup p = LeafLookup(tape, params);
    const StageForward out = rig.programs[0]->Forward(tape, p, 0, Var{});
    const Var local = with_local ? rig.programs[0]->Loss(tape, 0, 0, rig.programs[0]->Head(tape, p, 0, out.taps[0]))
                                 : Var{};
    return tape.Backward(AuxiliaryLoss(tape, local, out.output, received));
  };
  const GradientMap base = run(&g, true), shifted = run(&g_plus, true), only_delta = run(&delta, false);
  // No second-order terms: the shift is exactly the gradient of <delta, x>.
  for (const auto &[name, v] : base) {
    const auto d = only_delta.find(name);  // the head is not on the <delta, x> tape
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_NEAR(shifted.at(name)[i] - v[i], d == only_delta.end() ? 0.0 : d->second[i], 1e-12) << name;
    }
  }
  EXPECT_NE(only_delta.at("toy.W0"), std::vector<double>(4, 0.0));
}

TEST(SyncTiedTest, SumsReplicasIntoOwner) {
  StageGradients s0{{{"emb", {1.0, 2.0}}, {"w0", {3.0}}}, {}};
  StageGradients s1{{{"w1", {4.0}}}, {{"emb", {0.5, 0.25}}}};
  StageGradients s2{{{"w2", {5.0}}}, {{"emb", {0.125, 1.0}}}};
  const GradientMap merged = SyncTied({s0, s1, s2});
  EXPECT_EQ(merged.at("emb"), (std::vector<double>{1.625, 3.25}));
  EXPECT_EQ(merged.at("w1"), std::vector<double>{4.0});
  // Untied: identity.
  const GradientMap plain = SyncTied({s0});
  EXPECT_EQ(plain, s0.owned);
  // Zeroing one replica removes exactly its summand.
  StageGradients zeroed = s2;
  zeroed.replicas["emb"] = {0.0, 0.0};
  const GradientMap less = SyncTied({s0, s1, zeroed});
  EXPECT_EQ(merged.at("emb")[0] - less.at("emb")[0], 0.125);
  EXPECT_EQ(merged.at("emb")[1] - less.at("emb")[1], 1.0);
  StageGradients bad{{}, {{"emb", {1.0}}}};
  EXPECT_EQ(KindOf([&] { SyncTied({s0, bad}); }), ErrorKind::kShapeMismatch);
  StageGradients orphan{{}, {{"nope", {1.0}}}};
  EXPECT_EQ(KindOf([&] { SyncTied({s0, orphan}); }), ErrorKind::kInvalidArgument);
}

TEST(DeferredExitsTest, ClosureRunsOnce) {
  DeferredExits d;
  int calls = 0;
  d.Defer(3, [&] {
    ++calls;
    return std::vector<Var>{};
  });
  EXPECT_EQ(KindOf([&] { d.Defer(3, [] { return std::vector<Var>{}; }); }), ErrorKind::kProtocolViolation);
  d.Run(3);
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(KindOf([&] { d.Run(3); }), ErrorKind::kProtocolViolation);
  EXPECT_EQ(d.pending(), 0u);
}

// Bubble filling.

TEST(FillTest, Part2GradientTouchesOnlyItsBackwardStages) {
  const std::size_t P = 4, B = 4;
  ToyRig rig(P, 2, 2, {false, true, false, true}, B + 1, 41);
  FillPlan plan;
  plan.part2_backward_depth = {2};
  const PipelineSchedule s = BuildSchedule(P, B, plan);
  IterationOptions o = ToyOptions(rig.toy);
  o.keep_microbatch_grads = true;
  PipelineEngine engine(P);
  const IterationResult got = engine.Run(rig.setups, s, o);
  const std::size_t id = B;  // the inserted microbatch
  EXPECT_FALSE(got.microbatch_grads[0].count(id));
  EXPECT_FALSE(got.microbatch_grads[1].count(id));
  const std::vector<double> w(rig.toy.num_exits(), 1.0);
  const GradientMap alone = LinearToyGradients(rig.toy, std::span(rig.samples).subspan(B, 1), w);
  for (std::size_t r : {2, 3}) {
    for (const auto &[name, g] : got.microbatch_grads[r].at(id)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        // Losses enter scaled by 1 / B.
        EXPECT_NEAR(g[i] * static_cast<double>(B), alone.at(name)[i], 1e-12) << name;
      }
    }
  }
}

TEST(FillTest, OneInsertedMicrobatchRecoversMeanOverFiveSamples) {
  const std::size_t P = 4, B = 4;
  ToyRig rig(P, 2, 2, {false, true, false, true}, B + 1, 43);
  FillPlan plan;
  plan.part2_backward_depth = {2};
  PipelineEngine engine(P);
  const IterationResult got = engine.Run(rig.setups, BuildSchedule(P, B, plan), ToyOptions(rig.toy));
  const std::vector<double> w(rig.toy.num_exits(), 1.0);
  const GradientMap five = LinearToyGradients(rig.toy, rig.samples, w);
  const GradientMap four = LinearToyGradients(rig.toy, std::span(rig.samples).first(B), w);
  for (const auto &[name, g] : got.grads) {
    const bool late = name == "toy.W2" || name == "toy.W3" || name == "toy.A3";
    const auto &want = late ? five.at(name) : four.at(name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      EXPECT_NEAR(g[i], want[i], 1e-12) << name;
    }
  }
  const FillScaling scaling = ComputeFillScaling(BuildSchedule(P, B, plan), {{}, {0}, {}, {1}}, 2);
  EXPECT_EQ(scaling.stage_factor, (std::vector<double>{1.0, 1.0, 0.8, 0.8}));
  EXPECT_EQ(scaling.exit_factor, (std::vector<double>{1.0, 1.0}));
}

TEST(FillTest, Part1ScalesVisitedExitWeights) {
  const std::size_t P = 4, B = 4;
  ToyRig rig(P, 2, 2, {true, true, false, true}, B + 2, 45);
  const FillPlan plan = RestrictPart1ToExits(FillPlan{{2, 1}, {}, 0.5}, {true, true, false, false});
  const PipelineSchedule s = BuildSchedule(P, B, plan);
  const FillScaling scaling = ComputeFillScaling(s, {{0}, {1}, {}, {2}}, 3);
  EXPECT_EQ(scaling.part1_visits, (std::vector<std::size_t>{2, 1, 0}));
  EXPECT_DOUBLE_EQ(scaling.exit_factor[0], 4.0 / 6.0);
  EXPECT_DOUBLE_EQ(scaling.exit_factor[1], 4.0 / 5.0);
  EXPECT_EQ(scaling.exit_factor[2], 1.0);

  // Exit 0 sees all six samples, exit 1 five, the final exit four; each averaged.
  PipelineEngine engine(P);
  const IterationResult got = engine.Run(rig.setups, s, ToyOptions(rig.toy));
  const auto samples = std::span<const LinearSample>(rig.samples);
  GradientMap want;
  for (const auto &[name, t] : rig.toy.params) want.emplace(name, std::vector<double>(t.numel(), 0.0));
  const std::size_t counts[] = {6, 5, 4};
  for (std::size_t j = 0; j < 3; ++j) {
    std::vector<double> w(3, 0.0);
    w[j] = 1.0;
    const GradientMap part = LinearToyGradients(rig.toy, samples.first(counts[j]), w);
    for (auto &[name, g] : want) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += part.at(name)[i];
    }
  }
  EXPECT_LE(MaxRelativeError(got.grads, want), 1e-12);
}

TEST(FillTest, EmptyPlanMatchesPlainSchedule) {
  const FillPlan empty = PlanBubbleFill(4, 3.0);
  ASSERT_TRUE(empty.empty());
  ToyRig rig(4, 2, 2, {true, false, true, true}, 5, 3);
  PipelineEngine engine(4);
  const IterationResult a = engine.Run(rig.setups, BuildSchedule(4, 5, empty), ToyOptions(rig.toy));
  const IterationResult b = engine.Run(rig.setups, BuildSchedule(4, 5), ToyOptions(rig.toy));
  EXPECT_EQ(a.grads, b.grads);
}

TEST(FillTest, PlanMustEndPart1OnAnExit) {
  ToyRig rig(4, 2, 2, {false, false, false, true}, 8, 3);
  PipelineEngine engine(4);
  const PipelineSchedule s = BuildSchedule(4, 4, FillPlan{{2}, {}, 0.5});
  EXPECT_EQ(KindOf([&] { engine.Run(rig.setups, s, ToyOptions(rig.toy)); }), ErrorKind::kInvalidArgument);
}

// Running sums for a per-coordinate mean, variance and covariance.
struct Moments {
  double n = 0, sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  void Add(double x, double y) {
    n += 1;
    sx += x;
    sy += y;
    sxx += x * x;
    syy += y * y;
    sxy += x * y;
  }
  double var_x() const { return (sxx - sx * sx / n) / (n - 1); }
  double var_y() const { return (syy - sy * sy / n) / (n - 1); }
  double cov() const { return (sxy - sx * sy / n) / (n - 1); }
};

TEST(FillTest, RescaledFillIsUnbiasedWithLowerVariance) {
  const std::size_t P = 4, B = 4, iterations = 10000;
  const std::vector<bool> exits{true, true, false, true};
  const FillPlan plan = RestrictPart1ToExits(PlanBubbleFill(P, 0.5), {true, true, false, false});
  ASSERT_EQ(plan.part1_forward_depth, (std::vector<std::size_t>{2, 1}));
  ASSERT_EQ(plan.part2_backward_depth, (std::vector<std::size_t>{2, 1}));
  const PipelineSchedule filled = BuildSchedule(P, B, plan), plain = BuildSchedule(P, B);
  const std::size_t per_iteration = filled.routes.size();
  const LinearToy toy = MakeLinearToy(P, 2, 1, exits, 99);
  const std::size_t J = toy.num_exits();
  PipelineEngine engine(P);
  std::mt19937_64 rng(123);

  // Per coordinate: (filled - plain) for the bias check, (filled, plain) for the variances,
  // and per-sample exit components for the covariance condition.
  std::map<std::string, std::vector<Moments>> diff, est;
  std::map<std::string, std::vector<std::vector<Moments>>> parts;  // [coord][pair (j, k)]
  for (const auto &[name, t] : toy.params) {
    diff[name].resize(t.numel());
    est[name].resize(t.numel());
    parts[name].assign(t.numel(), std::vector<Moments>(J * J));
  }
  for (std::size_t it = 0; it < iterations; ++it) {
    const std::vector<LinearSample> samples = DrawLinearSamples(toy, per_iteration, rng);
    std::vector<std::unique_ptr<LinearToyStage>> programs;
    std::vector<StageSetup> setups;
    for (std::size_t r = 0; r < P; ++r) {
      programs.push_back(std::make_unique<LinearToyStage>(toy, r, samples));
      setups.push_back({programs.back().get(), LinearToyStageParams(toy, r), {}});
    }
    const IterationResult f = engine.Run(setups, filled, ToyOptions(toy));
    const IterationResult p = engine.Run(setups, plain, ToyOptions(toy));
    for (const auto &[name, g] : f.grads) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        diff[name][i].Add(g[i] - p.grads.at(name)[i], 0.0);
        est[name][i].Add(g[i], p.grads.at(name)[i]);
      }
    }
    for (std::size_t m = 0; m < B; ++m) {
      std::vector<GradientMap> component;
      for (std::size_t j = 0; j < J; ++j) {
        std::vector<double> w(J, 0.0);
        w[j] = 1.0;
        component.push_back(LinearToyGradients(toy, std::span(samples).subspan(m, 1), w));
      }
      for (auto &[name, coords] : parts) {
        for (std::size_t i = 0; i < coords.size(); ++i) {
          for (std::size_t j = 0; j < J; ++j) {
            for (std::size_t k = 0; k < J; ++k) {
              coords[i][j * J + k].Add(component[j].at(name)[i], component[k].at(name)[i]);
            }
          }
        }
      }
    }
  }
  std::size_t checked = 0;
  for (const auto &[name, coords] : diff) {
    const bool part2_stage = name == "toy.W2" || name == "toy.W3" || name == "toy.A3";
    for (std::size_t i = 0; i < coords.size(); ++i) {
      const Moments &d = coords[i];
      const double mean = d.sx / d.n, se = std::sqrt(d.var_x() / d.n);
      EXPECT_LE(std::abs(mean), 3.0 * se) << name << "[" << i << "]";
      bool nonneg_cov = true;
      for (std::size_t j = 0; j < J; ++j) {
        for (std::size_t k = j + 1; k < J; ++k) {
          nonneg_cov = nonneg_cov && parts[name][i][j * J + k].cov() >= 0.0;
        }
      }
      if (part2_stage || nonneg_cov) {
        EXPECT_LT(est[name][i].var_x(), est[name][i].var_y()) << name << "[" << i << "]";
        ++checked;
      }
    }
  }
  EXPECT_GE(checked, 8u);
}

}  // namespace
}  // namespace exitpipe
