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


#include "exitpipe/infer/decoder.h"

#include <cmath>
#include <string>

#include "exitpipe/error.h"
#include "exitpipe/tensor/kernels.h"

namespace exitpipe {

ExitDecision DecideExit(std::span<const double> logits, double threshold) {
  EXITPIPE_CHECK(threshold > 0.0 && threshold <= 1.0, ErrorKind::kInvalidArgument,
                 "exit threshold must lie in (0, 1]");
  EXITPIPE_CHECK(!logits.empty(), ErrorKind::kShapeMismatch, "empty logits");
  for (double v : logits) {
    EXITPIPE_CHECK(std::isfinite(v), ErrorKind::kNonFinite, "non-finite logit");
  }
  std::vector<double> probs(logits.size());
  kernels::SoftmaxRow(logits, probs);
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) {
      best = i;
    }
  }
  ExitDecision out;
  out.token = static_cast<int>(best);
  out.confidence = probs[best];
  out.exit = threshold < 1.0 && out.confidence > threshold;
  return out;
}

IncrementalModel::IncrementalModel(const EarlyExitModel &model) : model_(model) {
  const ModelConfig &c = model.config;
  ValidateConfig(c);
  layers_ = KVCache(c.num_layers, c.max_seq_len, c.hidden_dim);
  heads_ = KVCache(c.exits.size(), c.max_seq_len, c.hidden_dim);
  exits_at_.resize(c.num_layers + 1);
  for (std::size_t j = 0; j < c.num_exits(); ++j) {
    exits_at_[c.exit_layer(j)].push_back(j);
  }
}

const Tensor &IncrementalModel::param(const std::string &name) const {
  const auto it = model_.params.find(name);
  EXITPIPE_CHECK(it != model_.params.end(), ErrorKind::kInvalidArgument, "missing parameter " + name);
  return it->second;
}

std::vector<double> IncrementalModel::NormRow(std::span<const double> x, const std::string &gain) const {
  std::vector<double> y(x.size());
  kernels::RmsNormRow(x, param(gain).data(), y);
  return y;
}

std::vector<double> IncrementalModel::MatmulRow(std::span<const double> x, const std::string &weight,
                                                bool transpose_b) const {
  const Tensor &w = param(weight);
  const std::size_t n = transpose_b ? w.dim(0) : w.dim(1);
  std::vector<double> out(n);
  kernels::Matmul(x, 1, x.size(), w.data(), n, transpose_b, out);
  return out;
}

std::vector<double> IncrementalModel::Embed(int token, std::size_t pos) const {
  const ModelConfig &c = config();
  EXITPIPE_CHECK(token >= 0 && static_cast<std::size_t>(token) < c.vocab_size, ErrorKind::kInvalidToken,
                 "token id " + std::to_string(token) + " outside vocabulary");
  EXITPIPE_CHECK(pos < c.max_seq_len, ErrorKind::kContextOverflow,
                 "position " + std::to_string(pos) + " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  const std::size_t h = c.hidden_dim;
  const auto tok = param(kTokenEmbedding).data().subspan(static_cast<std::size_t>(token) * h, h);
  const auto at = param(kPositionEmbedding).data().subspan(pos * h, h);
  std::vector<double> x(h);
  for (std::size_t i = 0; i < h; ++i) {
    x[i] = tok[i] + at[i];
  }
  return x;
}

void IncrementalModel::LayerRow(const std::string &prefix, KVCache &cache, std::size_t slot, std::size_t pos,
                                std::vector<double> &x, bool fill_only) {
  const std::size_t h = config().hidden_dim;
  const std::size_t heads = config().num_heads, hd = h / heads;
  const std::vector<double> qkv = MatmulRow(NormRow(x, prefix + "norm1"), prefix + "attn.qkv", false);
  const std::span<const double> row(qkv);
  cache.Write(slot, pos, row.subspan(h, h), row.subspan(2 * h, h));
  if (fill_only) {
    return;
  }
  cache.RequireFilled(slot, pos + 1);
  const double *base = cache.base(slot);
  const std::size_t stride = cache.row_stride();
  std::vector<double> attn(h), probs(pos + 1);
  for (std::size_t head = 0; head < heads; ++head) {
    kernels::AttendRow(qkv.data() + head * hd, {base + head * hd, stride}, {base + h + head * hd, stride}, pos + 1, hd,
                       probs.data(), attn.data() + head * hd);
  }
  const std::vector<double> o = MatmulRow(attn, prefix + "attn.out", false);
  for (std::size_t i = 0; i < h; ++i) {
    x[i] = x[i] + o[i];
  }
  std::vector<double> up = MatmulRow(NormRow(x, prefix + "norm2"), prefix + "mlp.up", false);
  for (double &v : up) {
    v = kernels::Gelu(v);
  }
  const std::vector<double> down = MatmulRow(up, prefix + "mlp.down", false);
  for (std::size_t i = 0; i < h; ++i) {
    x[i] = x[i] + down[i];
  }
}

void IncrementalModel::RunLayer(std::size_t layer, std::size_t pos, std::vector<double> &x) {
  EXITPIPE_CHECK(layer < config().num_layers, ErrorKind::kInvalidArgument, "layer index out of range");
  EXITPIPE_CHECK(x.size() == config().hidden_dim, ErrorKind::kShapeMismatch, "hidden row width mismatch");
  LayerRow(LayerPrefix(layer), layers_, layer, pos, x, false);
}

std::vector<double> IncrementalModel::ExitLogits(std::size_t exit, std::size_t pos, std::span<const double> x) {
  const ModelConfig &c = config();
  EXITPIPE_CHECK(exit <= c.exits.size(), ErrorKind::kInvalidArgument, "exit index out of range");
  EXITPIPE_CHECK(x.size() == c.hidden_dim, ErrorKind::kShapeMismatch, "hidden row width mismatch");
  std::vector<double> y(x.begin(), x.end());
  if (exit == c.exits.size()) {
    y = NormRow(y, "final.norm");
  } else {
    const std::string prefix = ExitPrefix(exit);
    switch (c.exits[exit].kind) {
      case HeadKind::kMinimalistic:
        break;
      case HeadKind::kNormEmbed:
        y = NormRow(y, prefix + "norm");
        break;
      case HeadKind::kMlpEmbed: {
        std::vector<double> up = MatmulRow(NormRow(y, prefix + "mlp_norm"), prefix + "mlp.up", false);
        for (double &v : up) {
          v = kernels::Gelu(v);
        }
        const std::vector<double> down = MatmulRow(up, prefix + "mlp.down", false);
        for (std::size_t i = 0; i < y.size(); ++i) {
          y[i] = y[i] + down[i];
        }
        y = NormRow(y, prefix + "norm");
        break;
      }
      case HeadKind::kLayerEmbed:
        LayerRow(prefix + "layer.", heads_, exit, pos, y, false);
        y = NormRow(y, prefix + "norm");
        break;
    }
  }
  return MatmulRow(y, OutputEmbeddingName(c, exit), true);
}

void IncrementalModel::FillExitCache(std::size_t exit, std::size_t pos, std::span<const double> x) {
  const ModelConfig &c = config();
  if (exit >= c.exits.size() || c.exits[exit].kind != HeadKind::kLayerEmbed) {
    return;
  }
  std::vector<double> y(x.begin(), x.end());
  LayerRow(ExitPrefix(exit) + "layer.", heads_, exit, pos, y, true);
}

std::optional<ExitOutcome> IncrementalModel::VisitExitPoint(std::size_t layer, std::size_t pos,
                                                            std::span<const double> x,
                                                            std::optional<double> threshold,
                                                            std::vector<double> *confidences) {
  std::optional<ExitOutcome> fired;
  const std::size_t final_exit = config().exits.size();
  for (std::size_t j : exits_at_.at(layer)) {
    if (!threshold || fired) {
      FillExitCache(j, pos, x);
      continue;
    }
    const ExitDecision d = DecideExit(ExitLogits(j, pos, x), *threshold);
    if (confidences != nullptr) {
      confidences->push_back(d.confidence);
    }
    if (d.exit || j == final_exit) {
      fired = ExitOutcome{j, d.token, d.confidence};
    }
  }
  return fired;
}

bool IncrementalModel::KVComplete(std::size_t positions) const {
  for (std::size_t l = 0; l < layers_.num_slots(); ++l) {
    if (!layers_.SlotComplete(l, positions)) {
      return false;
    }
  }
  for (std::size_t j = 0; j < config().exits.size(); ++j) {
    if (config().exits[j].kind == HeadKind::kLayerEmbed && !heads_.SlotComplete(j, positions)) {
      return false;
    }
  }
  return true;
}

}  // namespace exitpipe
