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

#include "exitpipe/model/model.h"

#include <cmath>
#include <random>

#include "exitpipe/error.h"
#include "exitpipe/tensor/ops.h"

namespace exitpipe {
namespace {

constexpr double kInitStd = 0.02;

void AppendLayer(std::vector<ParamInfo> &out, const std::string &prefix, std::size_t h) {
  using I = ParamInfo::Init;
  out.push_back({prefix + "norm1", {h}, I::kOnes});
  out.push_back({prefix + "attn.qkv", {h, 3 * h}, I::kNormal});
  out.push_back({prefix + "attn.out", {h, h}, I::kResidualOut});
  out.push_back({prefix + "norm2", {h}, I::kOnes});
  out.push_back({prefix + "mlp.up", {h, 4 * h}, I::kNormal});
  out.push_back({prefix + "mlp.down", {4 * h, h}, I::kResidualOut});
}

std::size_t LayerSize(std::size_t h) { return 12 * h * h + 2 * h; }

std::uint64_t NameSeed(std::uint64_t seed, const std::string &name) {
  // FNV-1a over the name, mixed with the model seed.
  std::uint64_t x = 1469598103934665603ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
  for (unsigned char c : name) {
    x ^= c;
    x *= 1099511628211ULL;
  }
  return x;
}

Var Mlp(Tape &tape, const ParamLookup &p, const std::string &prefix, Var x) {
  const Var up = ops::Gelu(tape, ops::Matmul(tape, x, p(prefix + "mlp.up")));
  return ops::Matmul(tape, up, p(prefix + "mlp.down"));
}

}  // namespace

std::string LayerPrefix(std::size_t layer) { return "layers." + std::to_string(layer) + "."; }
std::string ExitPrefix(std::size_t exit) { return "exits." + std::to_string(exit) + "."; }

std::string OutputEmbeddingName(const ModelConfig &config, std::size_t exit) {
  if (config.tie_embeddings) {
    return kTokenEmbedding;
  }
  return exit < config.exits.size() ? ExitPrefix(exit) + "embed" : "final.embed";
}

std::vector<ParamInfo> EnumerateParameters(const ModelConfig &c) {
  using I = ParamInfo::Init;
  const std::size_t h = c.hidden_dim;
  std::vector<ParamInfo> out;
  out.push_back({kTokenEmbedding, {c.vocab_size, h}, I::kNormal});
  out.push_back({kPositionEmbedding, {c.max_seq_len, h}, I::kNormal});
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    AppendLayer(out, LayerPrefix(l), h);
  }
  for (std::size_t j = 0; j < c.exits.size(); ++j) {
    const std::string prefix = ExitPrefix(j);
    switch (c.exits[j].kind) {
      case HeadKind::kMinimalistic:
        break;
      case HeadKind::kNormEmbed:
        out.push_back({prefix + "norm", {h}, I::kOnes});
        break;
      case HeadKind::kMlpEmbed:
        out.push_back({prefix + "mlp_norm", {h}, I::kOnes});
        out.push_back({prefix + "mlp.up", {h, 4 * h}, I::kNormal});
        out.push_back({prefix + "mlp.down", {4 * h, h}, I::kResidualOut});
        out.push_back({prefix + "norm", {h}, I::kOnes});
        break;
      case HeadKind::kLayerEmbed:
        AppendLayer(out, prefix + "layer.", h);
        out.push_back({prefix + "norm", {h}, I::kOnes});
        break;
    }
    if (!c.tie_embeddings) {
      out.push_back({prefix + "embed", {c.vocab_size, h}, I::kNormal});
    }
  }
  out.push_back({"final.norm", {h}, I::kOnes});
  if (!c.tie_embeddings) {
    out.push_back({"final.embed", {c.vocab_size, h}, I::kNormal});
  }
  return out;
}

EarlyExitModel BuildModel(const ModelConfig &config, std::uint64_t seed) {
  ValidateConfig(config);
  EarlyExitModel model{config, {}};
  const double residual_std = kInitStd / std::sqrt(2.0 * static_cast<double>(config.num_layers));
  for (const auto &info : EnumerateParameters(config)) {
    std::vector<double> data(NumElements(info.shape));
    if (info.init == ParamInfo::Init::kOnes) {
      std::fill(data.begin(), data.end(), 1.0);
    } else {
      std::mt19937_64 rng(NameSeed(seed, info.name));
      std::normal_distribution<double> dist(0.0, info.init == ParamInfo::Init::kNormal ? kInitStd : residual_std);
      for (double &v : data) {
        v = dist(rng);
      }
    }
    model.params.emplace(info.name, Tensor(info.shape, std::move(data)));
  }
  return model;
}

std::size_t CountParameters(const EarlyExitModel &model) {
  std::size_t n = 0;
  for (const auto &[name, t] : model.params) {
    n += t.numel();
  }
  return n;
}

std::size_t ParameterCountFormula(const ModelConfig &c) {
  const std::size_t h = c.hidden_dim, vh = c.vocab_size * h;
  const std::size_t out_embed = c.tie_embeddings ? 0 : vh;
  std::size_t n = vh + c.max_seq_len * h + c.num_layers * LayerSize(h);
  for (const auto &e : c.exits) {
    switch (e.kind) {
      case HeadKind::kMinimalistic:
        break;
      case HeadKind::kNormEmbed:
        n += h;
        break;
      case HeadKind::kMlpEmbed:
        n += 8 * h * h + 2 * h;
        break;
      case HeadKind::kLayerEmbed:
        n += LayerSize(h) + h;
        break;
    }
    n += out_embed;
  }
  return n + h + out_embed;
}

ParamLookup LeafLookup(Tape &tape, const ParameterMap &params) {
  return [&tape, &params](const std::string &name) {
    auto it = params.find(name);
    EXITPIPE_CHECK(it != params.end(), ErrorKind::kInvalidArgument, "no parameter named '" + name + "'");
    return tape.Leaf(name, it->second);
  };
}

namespace graph {

Var Embed(Tape &tape, const ParamLookup &p, const ModelConfig &config, std::span<const int> tokens, std::size_t batch,
          std::size_t seq) {
  EXITPIPE_CHECK(seq <= config.max_seq_len, ErrorKind::kContextOverflow,
                 "sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  std::vector<int> positions(batch * seq);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    positions[i] = static_cast<int>(i % seq);
  }
  const Var tok = ops::Embedding(tape, p(kTokenEmbedding), tokens, {batch, seq});
  const Var pos = ops::Embedding(tape, p(kPositionEmbedding), positions, {batch, seq});
  return ops::Add(tape, tok, pos);
}

Var Layer(Tape &tape, const ParamLookup &p, const std::string &prefix, Var x, std::size_t num_heads) {
  const Var qkv = ops::Matmul(tape, ops::RmsNorm(tape, x, p(prefix + "norm1")), p(prefix + "attn.qkv"));
  const Var attn = ops::Matmul(tape, ops::CausalAttention(tape, qkv, num_heads), p(prefix + "attn.out"));
  x = ops::Add(tape, x, attn);
  return ops::Add(tape, x, Mlp(tape, p, prefix, ops::RmsNorm(tape, x, p(prefix + "norm2"))));
}

Var Head(Tape &tape, const ParamLookup &p, const ModelConfig &config, std::size_t exit, Var x) {
  EXITPIPE_CHECK(exit <= config.exits.size(), ErrorKind::kInvalidArgument, "exit index out of range");
  if (exit == config.exits.size()) {
    x = ops::RmsNorm(tape, x, p("final.norm"));
  } else {
    const std::string prefix = ExitPrefix(exit);
    switch (config.exits[exit].kind) {
      case HeadKind::kMinimalistic:
        break;
      case HeadKind::kNormEmbed:
        x = ops::RmsNorm(tape, x, p(prefix + "norm"));
        break;
      case HeadKind::kMlpEmbed:
        x = ops::Add(tape, x, Mlp(tape, p, prefix, ops::RmsNorm(tape, x, p(prefix + "mlp_norm"))));
        x = ops::RmsNorm(tape, x, p(prefix + "norm"));
        break;
      case HeadKind::kLayerEmbed:
        x = Layer(tape, p, prefix + "layer.", x, config.num_heads);
        x = ops::RmsNorm(tape, x, p(prefix + "norm"));
        break;
    }
  }
  return ops::Matmul(tape, x, p(OutputEmbeddingName(config, exit)), /*transpose_b=*/true);
}

Var WeightedSum(Tape &tape, std::span<const Var> losses, std::span<const double> weights) {
  EXITPIPE_CHECK(!losses.empty() && losses.size() == weights.size(), ErrorKind::kInvalidArgument,
                 "weighted sum needs one weight per loss");
  Var total = ops::Scale(tape, losses[0], weights[0]);
  for (std::size_t j = 1; j < losses.size(); ++j) {
    total = ops::Add(tape, total, ops::Scale(tape, losses[j], weights[j]));
  }
  return total;
}

}  // namespace graph

void CheckBatch(const ModelConfig &config, const TokenBatch &batch) {
  EXITPIPE_CHECK(batch.batch > 0 && batch.seq > 0, ErrorKind::kInvalidArgument, "empty batch");
  EXITPIPE_CHECK(batch.inputs.size() == batch.batch * batch.seq, ErrorKind::kShapeMismatch,
                 "batch inputs do not match batch x seq");
  EXITPIPE_CHECK(batch.targets.empty() || batch.targets.size() == batch.inputs.size(), ErrorKind::kShapeMismatch,
                 "batch targets do not match inputs");
  EXITPIPE_CHECK(batch.seq <= config.max_seq_len, ErrorKind::kContextOverflow,
                 "sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
}

LossVars RecordWeightedLoss(Tape &tape, const ParamLookup &p, const ModelConfig &config, const TokenBatch &batch,
                            std::span<const double> weights, double scale) {
  CheckBatch(config, batch);
  EXITPIPE_CHECK(weights.size() == config.num_exits(), ErrorKind::kInvalidArgument,
                 "expected " + std::to_string(config.num_exits()) + " loss weights, got " +
                     std::to_string(weights.size()));
  EXITPIPE_CHECK(batch.targets.size() == batch.inputs.size(), ErrorKind::kShapeMismatch, "batch has no targets");
  std::vector<Var> hidden{graph::Embed(tape, p, config, batch.inputs, batch.batch, batch.seq)};
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    hidden.push_back(graph::Layer(tape, p, LayerPrefix(l), hidden.back(), config.num_heads));
  }
  LossVars out;
  for (std::size_t j = 0; j < config.num_exits(); ++j) {
    const Var logits = graph::Head(tape, p, config, j, hidden[config.exit_layer(j)]);
    out.exit_losses.push_back(ops::CrossEntropy(tape, logits, batch.targets));
  }
  out.total = ops::Scale(tape, graph::WeightedSum(tape, out.exit_losses, weights), scale);
  return out;
}

std::vector<Tensor> ForwardAllExits(const EarlyExitModel &model, std::span<const int> tokens, std::size_t batch,
                                    std::size_t seq) {
  const ModelConfig &c = model.config;
  EXITPIPE_CHECK(tokens.size() == batch * seq && batch > 0 && seq > 0, ErrorKind::kShapeMismatch,
                 "tokens do not match batch x seq");
  Tape tape;
  // Parameters as constants: inference needs no gradient nodes.
  const ParamLookup p = [&](const std::string &name) { return tape.Constant(model.params.at(name)); };
  std::vector<Var> hidden{graph::Embed(tape, p, c, tokens, batch, seq)};
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    hidden.push_back(graph::Layer(tape, p, LayerPrefix(l), hidden.back(), c.num_heads));
  }
  std::vector<Tensor> out;
  for (std::size_t j = 0; j < c.num_exits(); ++j) {
    out.push_back(tape.value(graph::Head(tape, p, c, j, hidden[c.exit_layer(j)])));
  }
  return out;
}

WeightedLossResult WeightedLoss(const EarlyExitModel &model, const TokenBatch &batch, std::span<const double> weights) {
  Tape tape;
  const ParameterMap &params = model.params;
  const ParamLookup p = [&](const std::string &name) { return tape.Constant(params.at(name)); };
  const LossVars vars = RecordWeightedLoss(tape, p, model.config, batch, weights);
  WeightedLossResult out;
  out.loss = tape.value(vars.total).item();
  for (const Var v : vars.exit_losses) {
    out.exit_losses.push_back(tape.value(v).item());
  }
  return out;
}

GradientResult SingleDeviceGradients(const EarlyExitModel &model, std::span<const TokenBatch> batches,
                                     std::span<const double> weights) {
  EXITPIPE_CHECK(!batches.empty(), ErrorKind::kInvalidArgument, "no microbatches");
  GradientResult out;
  out.exit_losses.assign(model.config.num_exits(), 0.0);
  const double scale = 1.0 / static_cast<double>(batches.size());
  for (const auto &[name, t] : model.params) {
    out.grads.emplace(name, std::vector<double>(t.numel(), 0.0));
  }
  for (const auto &batch : batches) {
    Tape tape;
    const LossVars vars = RecordWeightedLoss(tape, LeafLookup(tape, model.params), model.config, batch, weights, scale);
    for (std::size_t j = 0; j < vars.exit_losses.size(); ++j) {
      out.exit_losses[j] += tape.value(vars.exit_losses[j]).item() * scale;
    }
    for (const auto &[name, g] : tape.Backward(vars.total)) {
      auto &acc = out.grads.at(name);
      for (std::size_t i = 0; i < g.size(); ++i) {
        acc[i] += g[i];
      }
    }
  }
  return out;
}

}  // namespace exitpipe
