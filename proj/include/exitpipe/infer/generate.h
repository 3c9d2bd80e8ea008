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


#ifndef EXITPIPE_INFER_GENERATE_H_
#define EXITPIPE_INFER_GENERATE_H_

#include <chrono>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "exitpipe/model/model.h"

namespace exitpipe {

struct GenerateOptions {
  double threshold = 1.0;
  std::size_t max_new_tokens = 16;
  // Number of pipeline stages; also sets the stage of each exit in the latency model.
  std::size_t num_stages = 2;
  // Recompute mode: a pass that would leave this many tokens with missing KV runs full depth.
  std::size_t max_deferred = 4;
  // Modeled time per stage. Empty means the stage's layer count.
  std::vector<double> stage_times;
  std::chrono::milliseconds message_timeout{30000};
};

struct TokenRecord {
  // Position the token occupies in the sequence (prompt length + index).
  std::size_t position = 0;
  int token = 0;
  std::size_t exit = 0;
  std::size_t exit_layer = 0;
  // 1-based stage holding the exit.
  std::size_t exit_stage = 0;
  // Confidence of every exit evaluated for this token, shallowest first, ending with the one that fired.
  std::vector<double> confidences;
  // Modeled time since the previous token was emitted.
  double latency = 0.0;
};

struct GenerationTrace {
  std::size_t prompt_length = 0;
  std::size_t num_layers = 0;
  std::vector<TokenRecord> tokens;
  double total_latency = 0.0;
  // Same token count with early exits disabled.
  double baseline_latency = 0.0;
  double wall_seconds = 0.0;
  // Positions whose KV the generation computed (prompt plus all generated tokens but the last).
  std::size_t cached_positions = 0;
  bool kv_complete = false;
  // Recompute mode only: forward passes, forced full passes, largest pass batch, and whether
  // the cache was complete right after each generated token.
  std::size_t passes = 0;
  std::size_t forced_full_passes = 0;
  std::size_t max_pass_batch = 0;
  std::vector<bool> kv_complete_after_token;

  std::vector<int> token_ids() const;
  std::size_t early_exits() const;
  // Mean exit depth in layers; the final exit counts as num_layers.
  double mean_exit_layer() const;
  double speedup() const { return total_latency > 0.0 ? baseline_latency / total_latency : 1.0; }
};

// Stage workers pass each token down the pipeline in position order. The stage whose exit
// fires first sends the token back to the first stage, which starts the next position at
// once, and the token's forward continues from the exit hidden state to fill every layer's KV.
// Throws kContextOverflow if prompt + new tokens - 1 exceeds max_seq_len.
GenerationTrace GeneratePipeline(const EarlyExitModel &model, std::span<const int> prompt,
                                 const GenerateOptions &options);

// Single worker. Tokens that exited early are deferred with their exit hidden state and
// finished inside later passes, batched with the current position.
GenerationTrace GenerateRecompute(const EarlyExitModel &model, std::span<const int> prompt,
                                  const GenerateOptions &options);

// Greedy decoding by re-running ForwardAllExits on the whole prefix and taking the final head.
std::vector<int> GenerateMonolithic(const EarlyExitModel &model, std::span<const int> prompt,
                                    std::size_t max_new_tokens);

struct ModeComparison {
  double threshold = 1.0;
  std::size_t prompts = 0;
  std::size_t tokens = 0;
  std::size_t early_exits = 0;
  std::size_t divergences = 0;
  // "prompt i: first difference at position p" for each divergent prompt.
  std::vector<std::string> divergence_details;
  bool confidences_equal = true;
  double mean_exit_layer = 0.0;
  double pipeline_latency = 0.0;
  double recompute_latency = 0.0;
  double baseline_latency = 0.0;
  double pipeline_speedup = 1.0;
  double recompute_speedup = 1.0;
};

// Runs both modes on every (prompt, threshold) pair and compares tokens and confidences.
std::vector<ModeComparison> CompareModes(const EarlyExitModel &model, const std::vector<std::vector<int>> &prompts,
                                         const std::vector<double> &thresholds, const GenerateOptions &options);

}  // namespace exitpipe

#endif  // EXITPIPE_INFER_GENERATE_H_
