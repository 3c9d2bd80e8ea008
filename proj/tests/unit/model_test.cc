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
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "exitpipe/error.h"
#include "exitpipe/model/checkpoint.h"
#include "exitpipe/model/corpus.h"
#include "exitpipe/model/model.h"
#include "exitpipe/model/partition.h"
#include "exitpipe/tensor/grad_check.h"
#include "exitpipe/tensor/ops.h"

namespace exitpipe {
namespace {

ModelConfig TinyConfig(bool tied = false) {
  ModelConfig c;
  c.num_layers = 4;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.vocab_size = 11;
  c.max_seq_len = 6;
  c.exits = {{1, HeadKind::kNormEmbed, 0.25}, {2, HeadKind::kMinimalistic, 0.5}};
  c.tie_embeddings = tied;
  return c;
}

TokenBatch RandomBatch(const ModelConfig &c, std::size_t batch, std::size_t seq, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(c.vocab_size) - 1);
  TokenBatch b{batch, seq, {}, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) {
    b.inputs.push_back(tok(rng));
    b.targets.push_back(tok(rng));
  }
  return b;
}

// Mean next-token cross-entropy computed directly from logits, independent of the tape op.
double ReferenceCrossEntropy(const Tensor &logits, const std::vector<int> &targets) {
  const std::size_t v = logits.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    double m = -INFINITY;
    for (std::size_t c = 0; c < v; ++c) {
      m = std::max(m, logits[r * v + c]);
    }
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
      z += std::exp(logits[r * v + c] - m);
    }
    total += m + std::log(z) - logits[r * v + static_cast<std::size_t>(targets[r])];
  }
  return total / static_cast<double>(targets.size());
}

ErrorKind KindOf(const std::function<void()> &fn) {
  try {
    fn();
  } catch (const Error &e) {
    return e.kind();
  }
  return ErrorKind::kInternal;
}

TEST(ModelConfigTest, Validation) {
  ModelConfig c = TinyConfig();
  EXPECT_NO_THROW(ValidateConfig(c));
  c.num_heads = 3;
  EXPECT_EQ(KindOf([&] { ValidateConfig(c); }), ErrorKind::kInvalidConfig);
  c = TinyConfig();
  c.exits = {{2, HeadKind::kMinimalistic, 1}, {2, HeadKind::kMinimalistic, 1}};
  EXPECT_EQ(KindOf([&] { ValidateConfig(c); }), ErrorKind::kInvalidConfig);
  c.exits = {{4, HeadKind::kMinimalistic, 1}};
  EXPECT_EQ(KindOf([&] { ValidateConfig(c); }), ErrorKind::kInvalidConfig);
  c.exits = {{0, HeadKind::kMinimalistic, -1}};
  EXPECT_EQ(KindOf([&] { ValidateConfig(c); }), ErrorKind::kInvalidConfig);
  c.exits = {{0, HeadKind::kMinimalistic, 1}};
  EXPECT_NO_THROW(ValidateConfig(c));
}

TEST(ModelConfigTest, ExitListRoundTrip) {
  const std::vector<ExitSpec> exits{{0, HeadKind::kLayerEmbed, 0.1}, {2, HeadKind::kMlpEmbed, 1.0 / 3.0}};
  EXPECT_EQ(ParseExitList(FormatExitList(exits)), exits);
  EXPECT_TRUE(ParseExitList("none").empty());
  EXPECT_EQ(KindOf([] { ParseExitList("2:bogus:1"); }), ErrorKind::kParse);
  EXPECT_EQ(KindOf([] { ParseExitList("2"); }), ErrorKind::kParse);
}

TEST(BuildModelTest, QuarterAndHalfDepthExits) {
  ModelConfig c = TinyConfig();
  c.num_layers = 8;
  c.exits = {{2, HeadKind::kMinimalistic, 0.25}, {4, HeadKind::kMinimalistic, 0.5}};
  const EarlyExitModel m = BuildModel(c, 1);
  const std::vector<int> tokens{1, 2, 3};
  const auto logits = ForwardAllExits(m, tokens, 1, 3);
  ASSERT_EQ(logits.size(), 3u);
  for (const auto &l : logits) {
    EXPECT_EQ(l.shape(), (Shape{1, 3, c.vocab_size}));
  }
}

TEST(BuildModelTest, NoExitsIsStandardGpt) {
  ModelConfig c = TinyConfig();
  c.exits.clear();
  const EarlyExitModel m = BuildModel(c, 1);
  const std::size_t h = c.hidden_dim, v = c.vocab_size;
  const std::size_t backbone = v * h + c.max_seq_len * h + c.num_layers * (12 * h * h + 2 * h);
  EXPECT_EQ(CountParameters(m), backbone + h + v * h);
  EXPECT_EQ(ForwardAllExits(m, std::vector<int>{4}, 1, 1).size(), 1u);
}

TEST(BuildModelTest, DeterministicFromSeed) {
  const EarlyExitModel a = BuildModel(TinyConfig(), 42);
  const EarlyExitModel b = BuildModel(TinyConfig(), 42);
  const EarlyExitModel c = BuildModel(TinyConfig(), 43);
  EXPECT_EQ(a.params, b.params);
  EXPECT_NE(a.params, c.params);
}

TEST(BuildModelTest, ParameterCountFormulaMatchesEnumeration) {
  for (bool tied : {false, true}) {
    for (HeadKind kind : {HeadKind::kMinimalistic, HeadKind::kNormEmbed, HeadKind::kMlpEmbed, HeadKind::kLayerEmbed}) {
      ModelConfig c = TinyConfig(tied);
      c.exits = {{0, kind, 0.5}, {3, HeadKind::kNormEmbed, 0.5}};
      EXPECT_EQ(CountParameters(BuildModel(c, 3)), ParameterCountFormula(c)) << HeadKindName(kind) << tied;
    }
  }
}

TEST(BuildModelTest, TyingSavesOneOutputMatrixPerHead) {
  // Untied, every head (early and final) has its own V x h output matrix besides the input
  // embedding; tied, all of them share the input embedding.
  const ModelConfig untied = TinyConfig(false), tied = TinyConfig(true);
  const std::size_t vh = untied.vocab_size * untied.hidden_dim;
  EXPECT_EQ(CountParameters(BuildModel(untied, 1)) - CountParameters(BuildModel(tied, 1)), 3 * vh);
  ModelConfig one_untied = untied, one_tied = tied;
  one_untied.exits.resize(1);
  one_tied.exits.resize(1);
  EXPECT_EQ(CountParameters(BuildModel(one_untied, 1)) - CountParameters(BuildModel(one_tied, 1)), 2 * vh);
}

TEST(ForwardTest, ErrorsOnBadInput) {
  const EarlyExitModel m = BuildModel(TinyConfig(), 1);
  EXPECT_EQ(KindOf([&] { ForwardAllExits(m, std::vector<int>{1, 11}, 1, 2); }), ErrorKind::kInvalidToken);
  EXPECT_EQ(KindOf([&] { ForwardAllExits(m, std::vector<int>(7, 0), 1, 7); }), ErrorKind::kContextOverflow);
}

TEST(ForwardTest, BatchPermutationPermutesLogits) {
  const ModelConfig c = TinyConfig();
  const EarlyExitModel m = BuildModel(c, 5);
  const TokenBatch b = RandomBatch(c, 3, 5, 9);
  std::vector<int> permuted;
  const std::size_t order[] = {2, 0, 1};
  for (std::size_t r : order) {
    permuted.insert(permuted.end(), b.inputs.begin() + r * 5, b.inputs.begin() + (r + 1) * 5);
  }
  const auto a = ForwardAllExits(m, b.inputs, 3, 5);
  const auto p = ForwardAllExits(m, permuted, 3, 5);
  const std::size_t row = 5 * c.vocab_size;
  for (std::size_t j = 0; j < a.size(); ++j) {
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t i = 0; i < row; ++i) {
        ASSERT_EQ(p[j][k * row + i], a[j][order[k] * row + i]);
      }
    }
  }
}

TEST(ForwardTest, Causality) {
  const ModelConfig c = TinyConfig();
  const EarlyExitModel m = BuildModel(c, 5);
  std::vector<int> tokens{3, 1, 4, 1, 5, 9};
  const auto base = ForwardAllExits(m, tokens, 1, 6);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    std::vector<int> changed = tokens;
    changed[t] = (changed[t] + 1) % static_cast<int>(c.vocab_size);
    const auto out = ForwardAllExits(m, changed, 1, 6);
    for (std::size_t j = 0; j < out.size(); ++j) {
      for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
        bool same = true;
        for (std::size_t v = 0; v < c.vocab_size; ++v) {
          same = same && out[j][pos * c.vocab_size + v] == base[j][pos * c.vocab_size + v];
        }
        EXPECT_EQ(same, pos < t) << "exit " << j << " token " << t << " pos " << pos;
      }
    }
  }
}

TEST(ForwardTest, ExitsAreReadOnlyTaps) {
  for (bool tied : {false, true}) {
    ModelConfig with = TinyConfig(tied), without = TinyConfig(tied);
    without.exits.clear();
    const std::vector<int> tokens{3, 1, 4, 1, 5};
    const auto a = ForwardAllExits(BuildModel(with, 8), tokens, 1, 5);
    const auto b = ForwardAllExits(BuildModel(without, 8), tokens, 1, 5);
    EXPECT_EQ(a.back(), b.back());
  }
}

TEST(WeightedLossTest, EqualsHandSummedPerExitLosses) {
  const ModelConfig c = TinyConfig();
  const EarlyExitModel m = BuildModel(c, 2);
  const TokenBatch b = RandomBatch(c, 2, 6, 4);
  const auto logits = ForwardAllExits(m, b.inputs, 2, 6);
  const std::vector<double> w{0.25, 0.5, 1.0};
  const WeightedLossResult r = WeightedLoss(m, b, w);
  double expected = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    const double ce = ReferenceCrossEntropy(logits[j], b.targets);
    EXPECT_NEAR(r.exit_losses[j], ce, 1e-12);
    expected += w[j] * ce;
  }
  EXPECT_NEAR(r.loss, expected, 1e-12);
}

TEST(WeightedLossTest, ZeroEarlyWeightsGiveStandardLoss) {
  ModelConfig with = TinyConfig(), without = TinyConfig();
  without.exits.clear();
  const TokenBatch b = RandomBatch(with, 2, 4, 6);
  const std::vector<double> w{0.0, 0.0, 1.0}, w1{1.0};
  EXPECT_EQ(WeightedLoss(BuildModel(with, 3), b, w).loss, WeightedLoss(BuildModel(without, 3), b, w1).loss);
}

TEST(WeightedLossTest, WeightCountMismatch) {
  const EarlyExitModel m = BuildModel(TinyConfig(), 2);
  const TokenBatch b = RandomBatch(m.config, 1, 3, 4);
  const std::vector<double> w{1.0, 1.0};
  EXPECT_EQ(KindOf([&] { WeightedLoss(m, b, w); }), ErrorKind::kInvalidArgument);
}

// theta + t * direction built from tape ops, so d/dt at t = 0 is <grad, direction>.
Var Displaced(Tape &tape, Var t, const Tensor &theta, const Tensor &direction) {
  const std::size_t cols = theta.cols();
  Var spread;
  if (theta.rank() == 1) {
    spread = ops::Matmul(tape, t, tape.Constant(Tensor::Full({1, cols}, 1.0)));
    spread = ops::Matmul(tape, tape.Constant(Tensor::Full({1}, 1.0)), spread);
  } else {
    const Var column = ops::Matmul(tape, tape.Constant(Tensor::Full({theta.rows(), 1}, 1.0)), t);
    spread = ops::Matmul(tape, column, tape.Constant(Tensor::Full({1, cols}, 1.0)));
  }
  return ops::Add(tape, tape.Constant(theta), ops::Mul(tape, spread, tape.Constant(direction)));
}

TEST(GradientTest, WholeModelMatchesFiniteDifferences) {
  // Every head kind, tied, with an exit before the first layer. Each parameter is checked
  // along random directions and coordinate by coordinate.
  ModelConfig c = TinyConfig(true);
  c.num_layers = 2;
  c.exits = {{0, HeadKind::kMlpEmbed, 0.3}, {1, HeadKind::kLayerEmbed, 0.7}};
  const EarlyExitModel m = BuildModel(c, 12);
  const TokenBatch b = RandomBatch(c, 2, 3, 13);
  const std::vector<double> w = c.loss_weights();
  std::mt19937_64 rng(14);
  std::normal_distribution<double> dist;
  for (const auto &[name, theta] : m.params) {
    for (int trial = 0; trial < 2; ++trial) {
      std::vector<double> d(theta.numel());
      for (double &v : d) {
        v = dist(rng);
      }
      const Tensor direction(theta.shape(), d);
      const ScalarFn f = [&](Tape &tape, Var t) {
        const ParamLookup p = [&](const std::string &n) {
          return n == name ? Displaced(tape, t, theta, direction) : tape.Constant(m.params.at(n));
        };
        return RecordWeightedLoss(tape, p, c, b, w).total;
      };
      EXPECT_LT(FiniteDifferenceCheck(f, Tensor::Zeros({1, 1}), 1e-5), 1e-6) << name;
    }
  }
  for (const auto &[name, theta] : m.params) {
    const ScalarFn f = [&](Tape &tape, Var x) {
      const ParamLookup p = [&](const std::string &n) { return n == name ? x : tape.Constant(m.params.at(n)); };
      return RecordWeightedLoss(tape, p, c, b, w).total;
    };
    EXPECT_LT(FiniteDifferenceCheck(f, m.params.at(name), 1e-5), 1e-6) << name;
  }
}

TEST(GradientTest, TiedGradientIsSumOfUntiedCopies) {
  const ModelConfig tied_cfg = TinyConfig(true);
  ModelConfig untied_cfg = TinyConfig(false);
  const EarlyExitModel tied = BuildModel(tied_cfg, 21);
  EarlyExitModel untied = BuildModel(untied_cfg, 21);
  for (auto &[name, t] : untied.params) {
    if (tied.params.count(name)) {
      t = tied.params.at(name);
    } else {
      t = tied.params.at(kTokenEmbedding);  // exits.j.embed and final.embed
    }
  }
  const std::vector<TokenBatch> batches{RandomBatch(tied_cfg, 2, 5, 1), RandomBatch(tied_cfg, 2, 5, 2)};
  const auto w = tied_cfg.loss_weights();
  const auto gt = SingleDeviceGradients(tied, batches, w);
  const auto gu = SingleDeviceGradients(untied, batches, w);
  const auto &shared = gt.grads.at(kTokenEmbedding);
  for (std::size_t i = 0; i < shared.size(); ++i) {
    const double sum = gu.grads.at(kTokenEmbedding)[i] + gu.grads.at("exits.0.embed")[i] +
                       gu.grads.at("exits.1.embed")[i] + gu.grads.at("final.embed")[i];
    EXPECT_NEAR(shared[i], sum, 1e-12 * (1.0 + std::abs(sum)));
  }
  EXPECT_EQ(gt.grads.at("layers.2.mlp.up"), gu.grads.at("layers.2.mlp.up"));
}

TEST(GradientTest, PerturbingSharedMatrixChangesEverything) {
  const ModelConfig c = TinyConfig(true);
  EarlyExitModel m = BuildModel(c, 4);
  const std::vector<int> tokens{1, 2, 3};
  const auto before = ForwardAllExits(m, tokens, 1, 3);
  m.params.at(kTokenEmbedding).mutable_data()[0 * c.hidden_dim + 3] += 0.1;  // row of an unused token
  const auto after = ForwardAllExits(m, tokens, 1, 3);
  for (std::size_t j = 0; j < before.size(); ++j) {
    EXPECT_NE(before[j], after[j]) << j;  // output row 0 of every head moved
  }
  m.params.at(kTokenEmbedding).mutable_data()[1 * c.hidden_dim] += 0.1;  // used token: input embedding moves
  Tape tape;
  const ParamLookup p = [&](const std::string &n) { return tape.Constant(m.params.at(n)); };
  const Tensor x0 = tape.value(graph::Embed(tape, p, c, tokens, 1, 3));
  EXPECT_EQ(x0[0], m.params.at(kTokenEmbedding)[c.hidden_dim] + m.params.at(kPositionEmbedding)[0]);
}

TEST(PartitionTest, BoundaryExitsGoToLaterStage) {
  ModelConfig c = TinyConfig();
  c.num_layers = 8;
  c.exits = {{2, HeadKind::kMinimalistic, 0.25}, {4, HeadKind::kMinimalistic, 0.5}};
  const StagePartition p = Partition(c, 4);
  ASSERT_EQ(p.num_stages(), 4u);
  EXPECT_TRUE(p.stages[0].exits.empty());
  EXPECT_EQ(p.stages[1].exits, std::vector<std::size_t>{0});
  EXPECT_EQ(p.stages[2].exits, std::vector<std::size_t>{1});
  EXPECT_EQ(p.stages[3].exits, std::vector<std::size_t>{2});
  EXPECT_TRUE(p.stages[3].has_final_head(c));
  EXPECT_EQ(p.stages[1].layer_begin, 2u);
  EXPECT_EQ(p.stages[1].layer_end, 4u);
}

TEST(PartitionTest, SingleStageHoldsEverything) {
  const ModelConfig c = TinyConfig(true);
  const StagePartition p = Partition(c, 1);
  ASSERT_EQ(p.num_stages(), 1u);
  EXPECT_EQ(p.stages[0].owned.size(), EnumerateParameters(c).size());
  EXPECT_TRUE(p.stages[0].replicas.empty());
  EXPECT_EQ(p.stages[0].exits, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(PartitionTest, DisjointCoverWithFlaggedReplicas) {
  for (bool tied : {false, true}) {
    ModelConfig c = TinyConfig(tied);
    c.exits = {{0, HeadKind::kNormEmbed, 0.1}, {2, HeadKind::kLayerEmbed, 0.5}};
    const StagePartition p = Partition(c, 2);
    std::multiset<std::string> owned;
    for (const auto &s : p.stages) {
      owned.insert(s.owned.begin(), s.owned.end());
      for (const auto &r : s.replicas) {
        EXPECT_EQ(r, kTokenEmbedding);
        EXPECT_NE(s.index, 0u);
      }
    }
    std::multiset<std::string> all;
    for (const auto &info : EnumerateParameters(c)) {
      all.insert(info.name);
    }
    EXPECT_EQ(owned, all);
    EXPECT_EQ(p.stages[0].exits, std::vector<std::size_t>{0});  // exit before the first layer
    EXPECT_EQ(p.stages[1].replicas.size(), tied ? 1u : 0u);
  }
}

TEST(PartitionTest, IndivisibleLayerCount) {
  EXPECT_EQ(KindOf([] { Partition(TinyConfig(), 3); }), ErrorKind::kInvalidConfig);
}

TEST(CheckpointTest, BitExactRoundTrip) {
  ModelConfig c = TinyConfig(true);
  c.exits[0].loss_weight = 0.1;  // not exactly representable in short decimal
  const EarlyExitModel m = BuildModel(c, 77);
  const std::string path = (std::filesystem::temp_directory_path() / "exitpipe_ckpt_test.bin").string();
  SaveCheckpoint(path, m, {{"step", "12"}});
  const Checkpoint ck = LoadCheckpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(ck.model.config, m.config);
  EXPECT_EQ(ck.model.params, m.params);
  EXPECT_EQ(ck.metadata, (Metadata{{"step", "12"}}));
  EXPECT_EQ(SerializeCheckpoint(ck.model, ck.metadata), SerializeCheckpoint(m, {{"step", "12"}}));
}

TEST(CheckpointTest, RejectsCorruptInput) {
  const std::string bytes = SerializeCheckpoint(BuildModel(TinyConfig(), 1));
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(KindOf([&] { DeserializeCheckpoint(bad); }), ErrorKind::kParse);
  EXPECT_EQ(KindOf([&] { DeserializeCheckpoint(bytes.substr(0, bytes.size() - 3)); }), ErrorKind::kParse);
  EXPECT_EQ(KindOf([] { LoadCheckpoint("/nonexistent/ckpt.bin"); }), ErrorKind::kIo);
}

TEST(CorpusTest, SeededAndInRange) {
  CorpusSpec spec;
  spec.length = 5000;
  const TokenCorpus a = TokenCorpus::Synthetic(50, spec);
  EXPECT_EQ(a.tokens(), TokenCorpus::Synthetic(50, spec).tokens());
  spec.seed = 2;
  EXPECT_NE(a.tokens(), TokenCorpus::Synthetic(50, spec).tokens());
  EXPECT_EQ(a.tokens().size(), 5000u);
  for (int t : a.tokens()) {
    ASSERT_TRUE(t >= 0 && t < 50);
  }
  std::mt19937_64 rng(1);
  const TokenBatch b = a.Sample(rng, 3, 7);
  EXPECT_EQ(b.inputs.size(), 21u);
  for (std::size_t i = 0; i + 1 < 7; ++i) {
    EXPECT_EQ(b.inputs[i + 1], b.targets[i]);
  }
}

TEST(CorpusTest, TokenFile) {
  const std::string path = (std::filesystem::temp_directory_path() / "exitpipe_tokens.txt").string();
  {
    std::ofstream(path) << "1 2 3\n4 0\n";
  }
  EXPECT_EQ(TokenCorpus::FromFile(path, 5).tokens(), (std::vector<int>{1, 2, 3, 4, 0}));
  EXPECT_EQ(KindOf([&] { TokenCorpus::FromFile(path, 4); }), ErrorKind::kInvalidToken);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace exitpipe
