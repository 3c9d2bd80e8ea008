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

#include "exitpipe/pipeline/stage.h"

#include "exitpipe/error.h"
#include "exitpipe/tensor/ops.h"

namespace exitpipe {

TransformerStage::TransformerStage(const ModelConfig &config, const StageLayout &layout,
                                   std::span<const TokenBatch> samples)
    : config_(config), layout_(layout), samples_(samples) {
  for (const auto &s : samples_) {
    CheckBatch(config_, s);
  }
}

const TokenBatch &TransformerStage::sample(std::size_t id) const {
  EXITPIPE_CHECK(id < samples_.size(), ErrorKind::kInvalidArgument, "no microbatch with id " + std::to_string(id));
  return samples_[id];
}

StageForward TransformerStage::Forward(Tape &tape, const ParamLookup &p, std::size_t id, Var input) const {
  const TokenBatch &mb = sample(id);
  Var x = input;
  if (layout_.has_embedding) {
    x = graph::Embed(tape, p, config_, mb.inputs, mb.batch, mb.seq);
  }
  EXITPIPE_CHECK(x.valid(), ErrorKind::kInvalidArgument, "stage " + std::to_string(layout_.index) + " needs an input");
  const Shape expected{mb.batch, mb.seq, config_.hidden_dim};
  EXITPIPE_CHECK(tape.value(x).shape() == expected, ErrorKind::kShapeMismatch,
                 "stage input " + ShapeToString(tape.value(x).shape()) + ", expected " + ShapeToString(expected));
  std::vector<Var> hidden{x};
  for (std::size_t l = layout_.layer_begin; l < layout_.layer_end; ++l) {
    hidden.push_back(graph::Layer(tape, p, LayerPrefix(l), hidden.back(), config_.num_heads));
  }
  StageForward out;
  out.output = hidden.back();
  for (std::size_t j : layout_.exits) {
    out.taps.push_back(hidden.at(config_.exit_layer(j) - layout_.layer_begin));
  }
  return out;
}

Var TransformerStage::Head(Tape &tape, const ParamLookup &p, std::size_t k, Var tap) const {
  return graph::Head(tape, p, config_, layout_.exits.at(k), tap);
}

Var TransformerStage::Loss(Tape &tape, std::size_t id, std::size_t, Var logits) const {
  return ops::CrossEntropy(tape, logits, sample(id).targets);
}

double TransformerStage::ActivationUnits() const {
  const TokenBatch &mb = samples_.front();
  return TransformerMemoryModel(config_, mb.batch, mb.seq, layout_.layer_end - layout_.layer_begin)
      .StageActivationUnits();
}

MemoryModel TransformerMemoryModel(const ModelConfig &config, std::size_t microbatch, std::size_t seq,
                                   std::size_t layers_per_stage) {
  MemoryModel m;
  m.seq_len = seq;
  m.microbatch = microbatch;
  m.vocab = config.vocab_size;
  m.hidden = config.hidden_dim;
  m.layers_per_stage = layers_per_stage;
  return m;
}

Var AuxiliaryLoss(Tape &tape, Var local, Var sent_activation, const Tensor *received_gradient) {
  if (!received_gradient) {
    EXITPIPE_CHECK(local.valid(), ErrorKind::kInvalidArgument,
                   "a stage that receives no gradient needs at least one local loss");
    return local;
  }
  const Tensor &x = tape.value(sent_activation);
  EXITPIPE_CHECK(received_gradient->shape() == x.shape(), ErrorKind::kShapeMismatch,
                 "gradient " + ShapeToString(received_gradient->shape()) + " does not match activation " +
                     ShapeToString(x.shape()));
  const Var link = ops::Dot(tape, sent_activation, tape.Constant(*received_gradient));
  return local.valid() ? ops::Add(tape, local, link) : link;
}

GradientMap SyncTied(const std::vector<StageGradients> &stages) {
  GradientMap merged;
  for (const auto &s : stages) {
    for (const auto &[name, g] : s.owned) {
      EXITPIPE_CHECK(merged.emplace(name, g).second, ErrorKind::kInvalidArgument,
                     "parameter '" + name + "' owned by two stages");
    }
  }
  for (const auto &s : stages) {
    for (const auto &[name, g] : s.replicas) {
      auto it = merged.find(name);
      EXITPIPE_CHECK(it != merged.end(), ErrorKind::kInvalidArgument, "replica '" + name + "' has no owner");
      EXITPIPE_CHECK(it->second.size() == g.size(), ErrorKind::kShapeMismatch,
                     "replica '" + name + "' does not match its owner");
      for (std::size_t i = 0; i < g.size(); ++i) {
        it->second[i] += g[i];
      }
    }
  }
  return merged;
}

}  // namespace exitpipe
