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


#ifndef EXITPIPE_INFER_DECODER_H_
#define EXITPIPE_INFER_DECODER_H_

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "exitpipe/infer/kv_cache.h"
#include "exitpipe/model/model.h"

namespace exitpipe {

struct ExitDecision {
  bool exit = false;
  int token = 0;
  double confidence = 0.0;
};

// Greedy decision on the logits of one position: confidence is the largest softmax
// probability, token the argmax (lowest index on ties). Exits iff confidence > threshold
// and threshold < 1. Throws kNonFinite on non-finite logits and kInvalidArgument for a
// threshold outside (0, 1].
ExitDecision DecideExit(std::span<const double> logits, double threshold);

// An exit that fired for a token.
struct ExitOutcome {
  std::size_t exit = 0;
  int token = 0;
  double confidence = 0.0;
};

// One-position-at-a-time forward over a KV cache. Every row goes through the same kernels
// as the batched ops, so a row computed here is bitwise equal to the matching row of
// ForwardAllExits on the full sequence.
//
// Methods touching different layers (and different exits) may run on different threads.
class IncrementalModel {
 public:
  // Keeps a reference to the model; it must outlive this object.
  explicit IncrementalModel(const EarlyExitModel &model);

  const ModelConfig &config() const { return model_.config; }

  // x_0 for one token. Throws kInvalidToken or kContextOverflow.
  std::vector<double> Embed(int token, std::size_t pos) const;
  // x_layer -> x_{layer+1} in place, writing the layer's KV at pos first.
  void RunLayer(std::size_t layer, std::size_t pos, std::vector<double> &x);
  // Logits [V] of exit j reading x at its attachment point. Head layers update their own cache.
  std::vector<double> ExitLogits(std::size_t exit, std::size_t pos, std::span<const double> x);
  // Writes the head-layer KV of exit j at pos without computing logits. No-op for heads
  // without attention.
  void FillExitCache(std::size_t exit, std::size_t pos, std::span<const double> x);

  // Visits the exits attached at boundary `layer` (the final head sits at num_layers) in depth
  // order. With a threshold each is evaluated until one fires and its confidence appended to
  // `confidences`; the final head always fires. Without one, or after a firing, the remaining
  // exits only fill their head caches, so continuation leaves the same cache as a full pass.
  std::optional<ExitOutcome> VisitExitPoint(std::size_t layer, std::size_t pos, std::span<const double> x,
                                            std::optional<double> threshold, std::vector<double> *confidences);

  const std::vector<std::size_t> &exits_at(std::size_t layer) const { return exits_at_.at(layer); }

  // True when every layer and every attention head cache holds positions [0, positions).
  bool KVComplete(std::size_t positions) const;
  const KVCache &layer_cache() const { return layers_; }
  const KVCache &exit_cache() const { return heads_; }

 private:
  const Tensor &param(const std::string &name) const;
  void LayerRow(const std::string &prefix, KVCache &cache, std::size_t slot, std::size_t pos, std::vector<double> &x,
                bool fill_only);
  std::vector<double> NormRow(std::span<const double> x, const std::string &gain) const;
  std::vector<double> MatmulRow(std::span<const double> x, const std::string &weight, bool transpose_b) const;

  const EarlyExitModel &model_;
  KVCache layers_;
  // One slot per early exit; only layer+embed heads use theirs.
  KVCache heads_;
  std::vector<std::vector<std::size_t>> exits_at_;
};

}  // namespace exitpipe

#endif  // EXITPIPE_INFER_DECODER_H_
