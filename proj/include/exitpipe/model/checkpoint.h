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

#ifndef EXITPIPE_MODEL_CHECKPOINT_H_
#define EXITPIPE_MODEL_CHECKPOINT_H_

#include <string>
#include <utility>
#include <vector>

#include "exitpipe/model/model.h"

namespace exitpipe {

using Metadata = std::vector<std::pair<std::string, std::string>>;

struct Checkpoint {
  EarlyExitModel model;
  // Extra key/value pairs stored after the model config (e.g. training step).
  Metadata metadata;
};

// Layout, all integers little-endian:
//   "EXITPIPE" u32 version
//   u32 n, then n x (u32 len, key bytes, u32 len, value bytes)   model config first, then metadata
//   u32 t, then t x (u32 len, name, u32 rank, u64 dims[rank], u64 offset)   offset in doubles
//   payload of little-endian IEEE-754 doubles
std::string SerializeCheckpoint(const EarlyExitModel &model, const Metadata &metadata = {});
Checkpoint DeserializeCheckpoint(const std::string &bytes);

void SaveCheckpoint(const std::string &path, const EarlyExitModel &model, const Metadata &metadata = {});
Checkpoint LoadCheckpoint(const std::string &path);

}  // namespace exitpipe

#endif  // EXITPIPE_MODEL_CHECKPOINT_H_
