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


#ifndef EXITPIPE_CLI_COMMANDS_H_
#define EXITPIPE_CLI_COMMANDS_H_

#include <cstddef>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "exitpipe/cli/run_config.h"

namespace exitpipe {

// Trains for config.steps and writes a header record plus one metrics record per step to
// metrics_path. Saves the trained model when checkpoint_path is set. Throws kNonFinite if a
// loss stops being finite.
void RunTrain(const RunConfig &config, const std::string &metrics_path, const std::string &checkpoint_path,
              std::ostream &log);

// Variants: standard, eager, deferred, reordered, fill (deferred with bubble filling).
const std::vector<std::string> &AnalyzeVariants();

// Simulates each variant under MakeCostModel(config). With out_dir set, writes
// <variant>.jsonl and <variant>.svg there. Prints one summary row per variant with span,
// per-stage busy time and peak memory, and the deltas against the standard schedule.
// Throws kInvalidArgument for an unknown variant.
void RunAnalyze(const RunConfig &config, const std::vector<std::string> &variants, const std::string &out_dir,
                std::ostream &out);

struct GenerateRequest {
  std::vector<int> prompt;
  std::optional<double> threshold;  // default: the first configured threshold
  std::string mode;                 // default: config.mode
  std::optional<std::size_t> max_new_tokens;
  std::optional<std::size_t> max_deferred;
};

// Parses whitespace- or comma-separated token ids.
std::vector<int> ParseTokenList(const std::string &text);

// Decodes one prompt with the model in config.checkpoint and prints one JSON record per
// generated token followed by a summary record per mode. In "both" mode, throws kInternal
// if the two modes disagree.
void RunGenerate(const RunConfig &config, const GenerateRequest &request, std::ostream &out);

// Runs every acceptance criterion, printing one line per criterion (JSON when json is
// set). Returns 0 if all pass, 1 otherwise.
int RunVerify(const RunConfig &config, bool json, std::ostream &out);

}  // namespace exitpipe

#endif  // EXITPIPE_CLI_COMMANDS_H_
