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

#include "exitpipe/model/partition.h"

#include <algorithm>

#include "exitpipe/error.h"

namespace exitpipe {

std::size_t StageOfExit(const ModelConfig &config, std::size_t num_stages, std::size_t exit) {
  const std::size_t per_stage = config.num_layers / num_stages;
  return std::min(config.exit_layer(exit) / per_stage, num_stages - 1);
}

StagePartition Partition(const ModelConfig &config, std::size_t num_stages) {
  ValidateConfig(config);
  EXITPIPE_CHECK(num_stages > 0 && config.num_layers % num_stages == 0, ErrorKind::kInvalidConfig,
                 "num_layers " + std::to_string(config.num_layers) + " is not divisible by " +
                     std::to_string(num_stages) + " stages");
  const std::size_t per_stage = config.num_layers / num_stages;
  StagePartition part;
  for (std::size_t r = 0; r < num_stages; ++r) {
    StageLayout s;
    s.index = r;
    s.layer_begin = r * per_stage;
    s.layer_end = (r + 1) * per_stage;
    s.has_embedding = r == 0;
    part.stages.push_back(std::move(s));
  }
  for (std::size_t j = 0; j < config.num_exits(); ++j) {
    part.stages[StageOfExit(config, num_stages, j)].exits.push_back(j);
  }

  // Assign each parameter by name prefix.
  for (const auto &info : EnumerateParameters(config)) {
    const std::string &name = info.name;
    std::size_t owner = 0;
    if (name.rfind("layers.", 0) == 0) {
      owner = std::stoul(name.substr(7)) / per_stage;
    } else if (name.rfind("exits.", 0) == 0) {
      owner = StageOfExit(config, num_stages, std::stoul(name.substr(6)));
    } else if (name.rfind("final.", 0) == 0) {
      owner = num_stages - 1;
    }
    part.stages[owner].owned.push_back(name);
  }
  if (config.tie_embeddings) {
    for (auto &s : part.stages) {
      if (s.index != 0 && !s.exits.empty()) {
        s.replicas.push_back(kTokenEmbedding);
      }
    }
  }
  return part;
}

ParameterMap StageParameters(const EarlyExitModel &model, const StageLayout &stage) {
  ParameterMap out;
  for (const auto *names : {&stage.owned, &stage.replicas}) {
    for (const auto &name : *names) {
      out.emplace(name, model.params.at(name));
    }
  }
  return out;
}

}  // namespace exitpipe
