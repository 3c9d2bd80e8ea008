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

#ifndef EXITPIPE_MODEL_PARTITION_H_
#define EXITPIPE_MODEL_PARTITION_H_

#include <cstddef>
#include <string>
#include <vector>

#include "exitpipe/model/model.h"

namespace exitpipe {

struct StageLayout {
  std::size_t index = 0;
  // Transformer layers [layer_begin, layer_end). The stage receives x_{layer_begin}.
  std::size_t layer_begin = 0;
  std::size_t layer_end = 0;
  bool has_embedding = false;
  // Exits evaluated on this stage in depth order; the final exit (index exits.size()) sits on the last stage.
  std::vector<std::size_t> exits;
  // Parameters whose gradient this stage owns, and tied replicas it holds for local use.
  std::vector<std::string> owned;
  std::vector<std::string> replicas;

  bool has_final_head(const ModelConfig &config) const {
    return !exits.empty() && exits.back() == config.exits.size();
  }
  std::size_t num_early_exits(const ModelConfig &config) const {
    return exits.size() - (has_final_head(config) ? 1 : 0);
  }
};

struct StagePartition {
  std::vector<StageLayout> stages;

  std::size_t num_stages() const { return stages.size(); }
};

// Stage holding exit j. An exit at a stage boundary belongs to the later stage.
std::size_t StageOfExit(const ModelConfig &config, std::size_t num_stages, std::size_t exit);

// Even split of the layers over num_stages. Throws kInvalidConfig if num_layers % num_stages != 0.
StagePartition Partition(const ModelConfig &config, std::size_t num_stages);

// Copies of the owned and replica parameters of one stage.
ParameterMap StageParameters(const EarlyExitModel &model, const StageLayout &stage);

}  // namespace exitpipe

#endif  // EXITPIPE_MODEL_PARTITION_H_
