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

#include "exitpipe/pipeline/trainer.h"

#include <algorithm>
#include <chrono>

#include "exitpipe/error.h"
#include "json.hpp"

namespace exitpipe {
namespace {

FillPlan MakePlan(const ModelConfig &config, const StagePartition &partition, const TrainerOptions &o) {
  if (!o.fill) {
    return {};
  }
  EXITPIPE_CHECK(!config.tie_embeddings, ErrorKind::kInvalidConfig,
                 "bubble filling cannot be combined with tied embeddings");
  EXITPIPE_CHECK(o.num_stages >= 2 && o.num_microbatches >= o.num_stages, ErrorKind::kInvalidConfig,
                 "bubble filling needs at least two stages and as many microbatches as stages");
  std::vector<bool> has_early_exit;
  for (const auto &s : partition.stages) {
    has_early_exit.push_back(s.num_early_exits(config) > 0);
  }
  return RestrictPart1ToExits(PlanBubbleFill(o.num_stages, o.f_over_b), has_early_exit);
}

}  // namespace

std::string MetricsJsonLine(const StepMetrics &m, bool with_time) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["exit_losses"] = m.exit_losses;
  j["weights"] = m.weights;
  j["peak_memory"] = m.peak_memory;
  j["microbatches"] = m.microbatches;
  if (with_time) {
    j["time"] = m.wall_seconds;
  }
  return j.dump();
}

Trainer::Trainer(EarlyExitModel model, const TokenCorpus &corpus, TrainerOptions options)
    : model_(std::move(model)), corpus_(corpus), options_(std::move(options)),
      partition_(Partition(model_.config, options_.num_stages)),
      plan_(MakePlan(model_.config, partition_, options_)),
      schedule_(BuildSchedule(options_.num_stages, options_.num_microbatches, plan_)), engine_(options_.num_stages),
      optimizer_(MakeOptimizer(options_.optimizer)), rng_(options_.data_seed) {
  EXITPIPE_CHECK(options_.microbatch > 0 && options_.num_microbatches > 0, ErrorKind::kInvalidConfig,
                 "batch sizes must be positive");
  EXITPIPE_CHECK(options_.seq_len > 0 && options_.seq_len <= model_.config.max_seq_len, ErrorKind::kInvalidConfig,
                 "sequence length must be in [1, max_seq_len]");
  EXITPIPE_CHECK(corpus_.vocab_size() == model_.config.vocab_size, ErrorKind::kInvalidConfig,
                 "corpus and model vocabularies differ");
  if (options_.weights.num_exits() == 0) {
    options_.weights = WeightSchedule::Constant(model_.config.loss_weights());
  }
  EXITPIPE_CHECK(options_.weights.num_exits() == model_.config.num_exits(), ErrorKind::kInvalidConfig,
                 "weight schedule has " + std::to_string(options_.weights.num_exits()) + " weights for " +
                     std::to_string(model_.config.num_exits()) + " exits");
}

StepMetrics Trainer::Step() {
  const auto start = std::chrono::steady_clock::now();
  std::vector<TokenBatch> batches;
  for (std::size_t i = 0; i < schedule_.routes.size(); ++i) {
    batches.push_back(corpus_.Sample(rng_, options_.microbatch, options_.seq_len));
  }
  std::vector<std::unique_ptr<TransformerStage>> programs;
  std::vector<const StageProgram *> raw;
  for (const auto &layout : partition_.stages) {
    programs.push_back(std::make_unique<TransformerStage>(model_.config, layout, batches));
    raw.push_back(programs.back().get());
  }
  IterationOptions it;
  it.defer_exit_forward = options_.defer_exit_forward;
  it.weights = options_.weights.At(step_);
  const IterationResult result = engine_.Run(MakeStageSetups(model_, partition_, raw), schedule_, it);
  optimizer_->Step(model_.params, result.grads);

  StepMetrics m;
  m.step = step_++;
  m.exit_losses = result.report.exit_losses;
  m.weights = it.weights;
  m.peak_memory = *std::max_element(result.report.peak_activation.begin(), result.report.peak_activation.end());
  m.microbatches = schedule_.routes.size();
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

}  // namespace exitpipe
