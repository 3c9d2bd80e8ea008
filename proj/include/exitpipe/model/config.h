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

#ifndef EXITPIPE_MODEL_CONFIG_H_
#define EXITPIPE_MODEL_CONFIG_H_

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace exitpipe {

enum class HeadKind {
  kMinimalistic,  // output embedding only
  kNormEmbed,     // rmsnorm, then output embedding
  kMlpEmbed,      // residual MLP block, rmsnorm, output embedding
  kLayerEmbed,    // full transformer layer, rmsnorm, output embedding
};

const char *HeadKindName(HeadKind kind);
HeadKind ParseHeadKind(const std::string &name);

// An early exit reading the hidden state x_layer that is passed between layers.
// Layer 0 is the embedding output, i.e. before the first transformer layer.
struct ExitSpec {
  std::size_t layer = 0;
  HeadKind kind = HeadKind::kMinimalistic;
  double loss_weight = 1.0;

  bool operator==(const ExitSpec &) const = default;
};

struct ModelConfig {
  std::size_t num_layers = 8;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 64;
  // Early exits in increasing depth. The final exit is implicit and always present.
  std::vector<ExitSpec> exits;
  bool tie_embeddings = false;
  double final_loss_weight = 1.0;

  bool operator==(const ModelConfig &) const = default;

  std::size_t num_exits() const { return exits.size() + 1; }
  // Depth of exit j, where j == exits.size() denotes the final exit.
  std::size_t exit_layer(std::size_t j) const { return j < exits.size() ? exits[j].layer : num_layers; }
  // Loss weights of all exits, final last.
  std::vector<double> loss_weights() const;
};

// Throws kInvalidConfig describing the first violated constraint.
void ValidateConfig(const ModelConfig &config);

// Exits given as "layer:kind:weight" separated by commas, e.g. "2:minimalistic:0.25,4:norm+embed:0.5".
std::vector<ExitSpec> ParseExitList(const std::string &text);
std::string FormatExitList(const std::vector<ExitSpec> &exits);

// Flat key/value form used by checkpoints and run configs. Doubles are written with
// enough digits to round-trip exactly.
std::vector<std::pair<std::string, std::string>> ConfigToKeyValues(const ModelConfig &config);
// Applies a single key; returns false if the key is not a model key.
bool ApplyConfigKey(ModelConfig &config, const std::string &key, const std::string &value);

std::string FormatDouble(double value);
double ParseDouble(const std::string &text, const std::string &what);
std::size_t ParseSize(const std::string &text, const std::string &what);
bool ParseBool(const std::string &text, const std::string &what);

}  // namespace exitpipe

#endif  // EXITPIPE_MODEL_CONFIG_H_
