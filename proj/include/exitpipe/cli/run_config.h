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


#ifndef EXITPIPE_CLI_RUN_CONFIG_H_
#define EXITPIPE_CLI_RUN_CONFIG_H_

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "exitpipe/model/config.h"
#include "exitpipe/model/corpus.h"
#include "exitpipe/pipeline/optimizer.h"
#include "exitpipe/pipeline/trainer.h"
#include "exitpipe/schedule/simulator.h"

namespace exitpipe {

// Everything a CLI run needs, read from "key = value" lines. Model keys carry a "model."
// prefix; see docs/config.md for the full list.
struct RunConfig {
  ModelConfig model;

  std::size_t num_stages = 4;
  std::size_t microbatch = 2;
  std::size_t global_batch = 8;
  std::size_t seq_len = 16;

  std::size_t steps = 500;
  OptimizerConfig optimizer;
  // Empty means the model's own loss weights for every step.
  std::string weight_schedule;
  bool fill = false;
  double f_over_b = 0.5;
  bool defer_exit_forward = true;
  bool record_time = false;

  // The synthetic corpus caps attainable confidence near 0.7, so the two low thresholds are
  // the ones at which the default model actually exits early.
  std::vector<double> thresholds{1.0, 0.95, 0.9, 0.8, 0.4, 0.2};
  std::string mode = "both";  // pipeline, recompute or both
  std::size_t max_deferred = 4;
  std::size_t max_new_tokens = 16;
  std::string checkpoint;

  // A token file replaces the synthetic corpus when set.
  std::string data_path;
  CorpusSpec corpus;

  // Cost model of analyze-schedule, in arbitrary time units.
  double cost_f = 2.0;
  double cost_b = 4.0;
  double cost_f_ee = 1.0;
  double cost_b_ee = 2.0;
  std::size_t analyze_microbatches = 6;

  // Multiplies the fill gradient rescaling factor; anything but 1 is a deliberate fault.
  double rescale_bias = 1.0;
  std::size_t verify_prompts = 20;

  std::uint64_t seed = 1;

  std::size_t num_microbatches() const { return global_batch / microbatch; }

  bool operator==(const RunConfig &other) const;
};

// The desk-scale setup: 8 layers, minimalistic exits at 1/4 and 1/2 depth with weights
// 1/4 and 1/2, tied embeddings.
RunConfig DefaultRunConfig();

// Throws kParse naming the line for malformed lines, unknown or repeated keys, and
// kInvalidConfig for values that parse but are inconsistent.
RunConfig ParseRunConfig(const std::string &text);
RunConfig LoadRunConfig(const std::string &path);
// Every key in canonical order; ParseRunConfig(SerializeRunConfig(c)) == c.
std::string SerializeRunConfig(const RunConfig &config);

// Consistency checks: valid model, divisible batch and layers, known mode. With check_files
// the data and checkpoint paths must exist (kIo).
void ValidateRunConfig(const RunConfig &config, bool check_files);

TrainerOptions MakeTrainerOptions(const RunConfig &config);
CostModel MakeCostModel(const RunConfig &config);
TokenCorpus MakeCorpus(const RunConfig &config);

std::string ReadTextFile(const std::string &path);
void WriteTextFile(const std::string &path, const std::string &text);

}  // namespace exitpipe

#endif  // EXITPIPE_CLI_RUN_CONFIG_H_
