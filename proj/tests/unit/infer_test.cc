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
#include <functional>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "exitpipe/error.h"
#include "exitpipe/infer/decoder.h"
#include "exitpipe/infer/generate.h"
#include "exitpipe/infer/kv_cache.h"
#include "exitpipe/model/model.h"
#include "exitpipe/schedule/latency.h"
#include "exitpipe/tensor/kernels.h"

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

ModelConfig InferConfig(bool tied) {
  ModelConfig c;
  c.num_layers = 4;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.vocab_size = 6;
  c.max_seq_len = 24;
  c.tie_embeddings = tied;
  c.exits = {{0, HeadKind::kMinimalistic, 0.25},
             {1, HeadKind::kLayerEmbed, 0.25},
             {2, HeadKind::kMlpEmbed, 0.25},
             {3, HeadKind::kNormEmbed, 0.25}};
  return c;
}

// Random weights give nearly flat next-token distributions; scaling the output matrices
// spreads the confidences so that thresholds in (0.4, 1) actually split tokens.
EarlyExitModel SharpModel(const ModelConfig &c, std::uint64_t seed, double scale) {
  EarlyExitModel m = BuildModel(c, seed);
  for (std::size_t j = 0; j < c.num_exits(); ++j) {
    const std::string name = OutputEmbeddingName(c, j);
    if (c.tie_embeddings && j > 0) {
      break;
    }
    for (double &v : m.params.at(name).mutable_data()) {
      v *= scale;
    }
  }
  return m;
}

std::vector<std::vector<int>> RandomPrompts(const ModelConfig &c, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(c.vocab_size) - 1);
  std::uniform_int_distribution<std::size_t> len(1, 5);
  std::vector<std::vector<int>> out(count);
  for (auto &p : out) {
    p.resize(len(rng));
    for (int &t : p) {
      t = tok(rng);
    }
  }
  return out;
}

GenerateOptions Options(double threshold, std::size_t stages, std::size_t max_new = 10) {
  GenerateOptions o;
  o.threshold = threshold;
  o.num_stages = stages;
  o.max_new_tokens = max_new;
  return o;
}

double MaxProb(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  kernels::SoftmaxRow(logits, p);
  return *std::max_element(p.begin(), p.end());
}

TEST(ExitDecisionTest, UniformLogitsNeverExitAboveQuarter) {
  const std::vector<double> logits(4, 0.7);
  for (double th : {0.25, 0.5, 0.9, 1.0}) {
    const ExitDecision d = DecideExit(logits, th);
    EXPECT_DOUBLE_EQ(d.confidence, 0.25);
    EXPECT_FALSE(d.exit);
    EXPECT_EQ(d.token, 0);
  }
  EXPECT_TRUE(DecideExit(logits, 0.2).exit);
}

TEST(ExitDecisionTest, LargeMarginExitsBelowOne) {
  const std::vector<double> logits{0.0, 40.0, 0.0, 0.0};
  const ExitDecision d = DecideExit(logits, 0.8);
  EXPECT_TRUE(d.exit);
  EXPECT_EQ(d.token, 1);
  EXPECT_GT(d.confidence, 1.0 - 1e-12);
  EXPECT_FALSE(DecideExit(logits, 1.0).exit);
}

TEST(ExitDecisionTest, ThresholdOneNeverExits) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 30.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(5);
    for (double &v : logits) {
      v = n(rng);
    }
    logits[trial % 5] += 1000.0;
    EXPECT_FALSE(DecideExit(logits, 1.0).exit);
  }
}

TEST(ExitDecisionTest, TiesPickLowestIndexAndBadInputsThrow) {
  EXPECT_EQ(DecideExit(std::vector<double>{1.0, 3.0, 3.0, 2.0}, 0.5).token, 1);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(KindOf([&] { DecideExit(std::vector<double>{0.0, nan}, 0.5); }), ErrorKind::kNonFinite);
  EXPECT_EQ(KindOf([&] { DecideExit(std::vector<double>{0.0, INFINITY}, 0.5); }), ErrorKind::kNonFinite);
  EXPECT_EQ(KindOf([] { DecideExit(std::vector<double>{0.0}, 0.0); }), ErrorKind::kInvalidArgument);
  EXPECT_EQ(KindOf([] { DecideExit(std::vector<double>{0.0}, 1.5); }), ErrorKind::kInvalidArgument);
}

TEST(KVCacheTest, MonotoneFillAndAbsentReads) {
  KVCache cache(2, 4, 3);
  const std::vector<double> k{1, 2, 3}, v{4, 5, 6}, other{1, 2, 3.5};
  EXPECT_FALSE(cache.present(0, 0));
  cache.Write(0, 0, k, v);
  EXPECT_TRUE(cache.present(0, 0));
  EXPECT_FALSE(cache.present(1, 0));
  cache.Write(0, 0, k, v);
  EXPECT_EQ(cache.writes(), 1u);
  EXPECT_EQ(KindOf([&] { cache.Write(0, 0, other, v); }), ErrorKind::kInternal);
  EXPECT_EQ(KindOf([&] { cache.RequireFilled(0, 2); }), ErrorKind::kInternal);
  EXPECT_NO_THROW(cache.RequireFilled(0, 1));
  EXPECT_EQ(KindOf([&] { cache.Write(0, 4, k, v); }), ErrorKind::kContextOverflow);
  EXPECT_EQ(cache.base(0)[3], 4.0);
  EXPECT_TRUE(cache.SlotComplete(0, 1));
  EXPECT_FALSE(cache.SlotComplete(0, 2));
}

// Every head kind, tied and untied: the row-at-a-time forward equals the batched forward bit for bit.
TEST(IncrementalModelTest, RowsMatchBatchedForwardBitwise) {
  for (bool tied : {false, true}) {
    const ModelConfig c = InferConfig(tied);
    const EarlyExitModel model = BuildModel(c, 11);
    const std::vector<int> tokens{3, 1, 4, 1, 5, 2, 0};
    const std::vector<Tensor> full = ForwardAllExits(model, tokens, 1, tokens.size());
    IncrementalModel im(model);
    for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
      std::vector<double> x = im.Embed(tokens[pos], pos);
      for (std::size_t l = 0; l <= c.num_layers; ++l) {
        for (std::size_t j : im.exits_at(l)) {
          const std::vector<double> logits = im.ExitLogits(j, pos, x);
          const auto expect = full[j].data().subspan(pos * c.vocab_size, c.vocab_size);
          EXPECT_TRUE(std::equal(logits.begin(), logits.end(), expect.begin())) << "exit " << j << " pos " << pos;
        }
        if (l < c.num_layers) {
          im.RunLayer(l, pos, x);
        }
      }
    }
    EXPECT_TRUE(im.KVComplete(tokens.size()));
    EXPECT_FALSE(im.KVComplete(tokens.size() + 1));
  }
}

TEST(IncrementalModelTest, AttentionOverMissingPositionThrows) {
  const ModelConfig c = InferConfig(false);
  const EarlyExitModel model = BuildModel(c, 2);
  IncrementalModel im(model);
  std::vector<double> x = im.Embed(1, 1);
  EXPECT_EQ(KindOf([&] { im.RunLayer(0, 1, x); }), ErrorKind::kInternal);
  EXPECT_EQ(KindOf([&] { im.Embed(6, 0); }), ErrorKind::kInvalidToken);
  EXPECT_EQ(KindOf([&] { im.Embed(0, 24); }), ErrorKind::kContextOverflow);
}

TEST(GenerateTest, ThresholdOneMatchesMonolithicGreedy) {
  for (bool tied : {false, true}) {
    const ModelConfig c = InferConfig(tied);
    const EarlyExitModel model = SharpModel(c, 5, 30.0);
    for (const auto &prompt : RandomPrompts(c, 6, 8)) {
      const std::vector<int> expect = GenerateMonolithic(model, prompt, 10);
      for (std::size_t P : {1u, 2u, 4u}) {
        const GenerationTrace a = GeneratePipeline(model, prompt, Options(1.0, P));
        const GenerationTrace b = GenerateRecompute(model, prompt, Options(1.0, P));
        EXPECT_EQ(a.token_ids(), expect);
        EXPECT_EQ(b.token_ids(), expect);
        EXPECT_EQ(a.early_exits(), 0u);
        EXPECT_EQ(b.early_exits(), 0u);
        EXPECT_EQ(a.speedup(), 1.0);
        EXPECT_EQ(b.speedup(), 1.0);
        EXPECT_EQ(b.max_pass_batch, 1u);
        EXPECT_EQ(b.passes, prompt.size() + 9);
        EXPECT_EQ(b.forced_full_passes, 0u);
        EXPECT_DOUBLE_EQ(a.mean_exit_layer(), static_cast<double>(c.num_layers));
      }
    }
  }
}

// Reference for early-exit decoding: rerun the whole prefix through ForwardAllExits and apply
// the decision rule exit by exit.
void ExpectMatchesFullForward(const EarlyExitModel &model, const std::vector<int> &prompt, const GenerationTrace &trace,
                              double threshold) {
  const ModelConfig &c = model.config;
  std::vector<int> seq = prompt;
  for (const TokenRecord &r : trace.tokens) {
    ASSERT_EQ(r.position, seq.size());
    const std::vector<Tensor> full = ForwardAllExits(model, seq, 1, seq.size());
    std::vector<double> confidences;
    std::size_t fired = c.exits.size();
    for (std::size_t j = 0; j < c.num_exits(); ++j) {
      const auto logits = full[j].data().subspan((seq.size() - 1) * c.vocab_size, c.vocab_size);
      confidences.push_back(MaxProb(logits));
      if (DecideExit(logits, threshold).exit) {
        fired = j;
        break;
      }
    }
    EXPECT_EQ(r.exit, fired);
    EXPECT_EQ(r.confidences, confidences);
    const auto logits = full[fired].data().subspan((seq.size() - 1) * c.vocab_size, c.vocab_size);
    EXPECT_EQ(r.token, DecideExit(logits, threshold).token);
    seq.push_back(r.token);
  }
}

TEST(GenerateTest, EarlyExitDecodingMatchesFullForwardOracle) {
  for (bool tied : {false, true}) {
    const ModelConfig c = InferConfig(tied);
    const EarlyExitModel model = SharpModel(c, 21, 30.0);
    std::size_t exits = 0;
    for (const auto &prompt : RandomPrompts(c, 5, 9)) {
      for (double th : {0.8, 0.5}) {
        const GenerationTrace a = GeneratePipeline(model, prompt, Options(th, 2));
        const GenerationTrace b = GenerateRecompute(model, prompt, Options(th, 2));
        ExpectMatchesFullForward(model, prompt, a, th);
        ExpectMatchesFullForward(model, prompt, b, th);
        exits += a.early_exits();
      }
    }
    EXPECT_GT(exits, 0u);
  }
}

TEST(GenerateTest, ModesAgreeOnTwentyPromptsAcrossThresholds) {
  const ModelConfig c = InferConfig(false);
  const EarlyExitModel model = SharpModel(c, 7, 30.0);
  const auto prompts = RandomPrompts(c, 20, 17);
  const std::vector<double> thresholds{1.0, 0.95, 0.9, 0.8, 0.6, 0.4};
  for (std::size_t P : {2u, 4u}) {
    const std::vector<ModeComparison> report = CompareModes(model, prompts, thresholds, Options(1.0, P, 12));
    ASSERT_EQ(report.size(), thresholds.size());
    for (const ModeComparison &m : report) {
      EXPECT_EQ(m.divergences, 0u) << "threshold " << m.threshold;
      EXPECT_TRUE(m.confidences_equal) << "threshold " << m.threshold;
      EXPECT_EQ(m.prompts, 20u);
      EXPECT_EQ(m.tokens, 240u);
    }
    EXPECT_EQ(report[0].pipeline_speedup, 1.0);
    EXPECT_EQ(report[0].recompute_speedup, 1.0);
    EXPECT_EQ(report[0].early_exits, 0u);
    EXPECT_GT(report[3].early_exits, 0u);
    EXPECT_GT(report[5].pipeline_speedup, 1.0);
    EXPECT_GT(report[5].early_exits, report[3].early_exits);
    // Lower thresholds admit exits at least as shallow on this prompt set.
    for (std::size_t i = 1; i < report.size(); ++i) {
      EXPECT_LE(report[i].mean_exit_layer, report[i - 1].mean_exit_layer) << "threshold " << report[i].threshold;
    }
  }
}

TEST(GenerateTest, KVCompleteAfterGenerationInBothModes) {
  const ModelConfig c = InferConfig(false);
  const EarlyExitModel model = SharpModel(c, 7, 30.0);
  for (const auto &prompt : RandomPrompts(c, 8, 23)) {
    for (double th : {1.0, 0.6, 0.4}) {
      const GenerationTrace a = GeneratePipeline(model, prompt, Options(th, 4));
      const GenerationTrace b = GenerateRecompute(model, prompt, Options(th, 4));
      EXPECT_EQ(a.cached_positions, prompt.size() + 9);
      EXPECT_TRUE(a.kv_complete);
      EXPECT_TRUE(b.kv_complete);
    }
  }
}

TEST(GenerateTest, MaxDeferredOneFillsEveryStep) {
  const ModelConfig c = InferConfig(false);
  const EarlyExitModel model = SharpModel(c, 7, 30.0);
  std::size_t early = 0;
  for (const auto &prompt : RandomPrompts(c, 8, 29)) {
    GenerateOptions o = Options(0.4, 2);
    o.max_deferred = 1;
    const GenerationTrace b = GenerateRecompute(model, prompt, o);
    EXPECT_EQ(b.forced_full_passes, b.early_exits());
    EXPECT_EQ(b.max_pass_batch, 1u);
    for (bool complete : b.kv_complete_after_token) {
      EXPECT_TRUE(complete);
    }
    // Every pass ran full depth, so every token pays the full stage sum.
    for (const TokenRecord &r : b.tokens) {
      EXPECT_EQ(r.latency, 4.0);
    }
    EXPECT_EQ(b.token_ids(), GeneratePipeline(model, prompt, o).token_ids());
    early += b.early_exits();
  }
  EXPECT_GT(early, 0u);
}

TEST(GenerateTest, DeferredTokensAreFinishedInLaterPasses) {
  const ModelConfig c = InferConfig(false);
  const EarlyExitModel model = SharpModel(c, 7, 30.0);
  bool saw_gap = false, saw_batch = false;
  for (const auto &prompt : RandomPrompts(c, 8, 31)) {
    for (std::size_t cap : {2u, 4u, 64u}) {
      GenerateOptions o = Options(0.4, 4, 14);
      o.max_deferred = cap;
      const GenerationTrace b = GenerateRecompute(model, prompt, o);
      EXPECT_LE(b.max_pass_batch, cap);
      EXPECT_TRUE(b.kv_complete);
      saw_gap = saw_gap || std::count(b.kv_complete_after_token.begin(), b.kv_complete_after_token.end(), false) > 0;
      saw_batch = saw_batch || b.max_pass_batch > 1;
      EXPECT_EQ(b.token_ids(), GeneratePipeline(model, prompt, o).token_ids());
    }
  }
  EXPECT_TRUE(saw_gap);
  EXPECT_TRUE(saw_batch);
}

TEST(GenerateTest, RepeatedRunsAreIdentical) {
  const ModelConfig c = InferConfig(true);
  const EarlyExitModel model = SharpModel(c, 13, 30.0);
  const std::vector<int> prompt{1, 2, 3};
  for (auto *fn : {&GeneratePipeline, &GenerateRecompute}) {
    const GenerationTrace a = fn(model, prompt, Options(0.6, 4, 16));
    const GenerationTrace b = fn(model, prompt, Options(0.6, 4, 16));
    ASSERT_EQ(a.tokens.size(), b.tokens.size());
    for (std::size_t t = 0; t < a.tokens.size(); ++t) {
      EXPECT_EQ(a.tokens[t].token, b.tokens[t].token);
      EXPECT_EQ(a.tokens[t].exit, b.tokens[t].exit);
      EXPECT_EQ(a.tokens[t].confidences, b.tokens[t].confidences);
      EXPECT_EQ(a.tokens[t].latency, b.tokens[t].latency);
    }
  }
}

TEST(GenerateTest, PipelineLatencyFollowsInferenceModel) {
  const ModelConfig c = InferConfig(false);
  const EarlyExitModel model = SharpModel(c, 7, 30.0);
  GenerateOptions o = Options(0.4, 4, 12);
  o.stage_times = {1.0, 2.0, 1.5, 0.5};
  const GenerationTrace a = GeneratePipeline(model, std::vector<int>{2, 0, 5}, o);
  std::vector<std::size_t> stages;
  for (const TokenRecord &r : a.tokens) {
    stages.push_back(r.exit_stage);
    EXPECT_EQ(r.exit_stage, r.exit_layer == c.num_layers ? 4u : r.exit_layer + 1);
  }
  const InferenceLatency expect = ModelInferenceLatency(stages, o.stage_times);
  for (std::size_t t = 0; t < a.tokens.size(); ++t) {
    EXPECT_EQ(a.tokens[t].latency, expect.pipeline[t]);
  }
  EXPECT_EQ(a.total_latency, expect.pipeline_total);
  EXPECT_GE(a.speedup(), 1.0);

  const GenerationTrace b = GenerateRecompute(model, std::vector<int>{2, 0, 5}, o);
  for (const TokenRecord &r : b.tokens) {
    EXPECT_GE(r.latency, 1.0);
    EXPECT_LE(r.latency, 5.0);
  }
}

TEST(GenerateTest, RejectsBadRequests) {
  const ModelConfig c = InferConfig(false);
  const EarlyExitModel model = BuildModel(c, 1);
  for (auto *fn : {&GeneratePipeline, &GenerateRecompute}) {
    EXPECT_EQ(KindOf([&] { fn(model, {}, Options(1.0, 2)); }), ErrorKind::kInvalidArgument);
    EXPECT_EQ(KindOf([&] { fn(model, std::vector<int>{9}, Options(1.0, 2)); }), ErrorKind::kInvalidToken);
    EXPECT_EQ(KindOf([&] { fn(model, std::vector<int>{1, 2, 3, 4, 5}, Options(1.0, 2, 21)); }), ErrorKind::kContextOverflow);
    EXPECT_NO_THROW(fn(model, std::vector<int>{1, 2, 3, 4, 5}, Options(1.0, 2, 20)));
    EXPECT_EQ(KindOf([&] { fn(model, std::vector<int>{1}, Options(0.0, 2)); }), ErrorKind::kInvalidArgument);
    EXPECT_EQ(KindOf([&] { fn(model, std::vector<int>{1}, Options(1.0, 3)); }), ErrorKind::kInvalidConfig);
    GenerateOptions o = Options(0.5, 2);
    o.max_deferred = 0;
    EXPECT_EQ(KindOf([&] { fn(model, std::vector<int>{1}, o); }), ErrorKind::kInvalidArgument);
  }
}

}  // namespace
}  // namespace exitpipe
