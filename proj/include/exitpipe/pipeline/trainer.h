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

#ifndef EXITPIPE_PIPELINE_TRAINER_H_
#define EXITPIPE_PIPELINE_TRAINER_H_

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "exitpipe/model/corpus.h"
#include "exitpipe/model/model.h"
#include "exitpipe/model/partition.h"
#include "exitpipe/pipeline/engine.h"
#include "exitpipe/pipeline/optimizer.h"
#include "exitpipe/pipeline/weights.h"

namespace exitpipe {

struct TrainerOptions {
  std::size_t num_stages = 4;
  std::size_t microbatch = 2;        // sequences per microbatch
  std::size_t num_microbatches = 4;  // global batch / microbatch
  std::size_t seq_len = 16;
  OptimizerConfig optimizer;
  WeightSchedule weights;  // empty: the model's configured weights
  bool fill = false;
  double f_over_b = 0.5;  // sizes the fill plan
  bool defer_exit_forward = true;
  std::uint64_t data_seed = 1;
};

struct StepMetrics {
  std::size_t step = 0;
  std::vector<double> exit_losses;  // before the update, final last
  std::vector<double> weights;
  double peak_memory = 0.0;  // largest per-stage activation peak, in memory units
  std::size_t microbatches = 0;  // including inserted fill microbatches
  double wall_seconds = 0.0;
};

// One JSON object per line. The wall-clock field is optional because it breaks
// byte-for-byte reproducibility.
std::string MetricsJsonLine(const StepMetrics &metrics, bool with_time);

// Pipeline-parallel training loop: each step samples a batch, runs one 1F1B iteration and
// applies the optimizer to the merged gradients.
class Trainer {
 public:
  Trainer(EarlyExitModel model, const TokenCorpus &corpus, TrainerOptions options);

  StepMetrics Step();

  std::size_t step() const { return step_; }
  const EarlyExitModel &model() const { return model_; }
  const FillPlan &fill_plan() const { return plan_; }

 private:
  EarlyExitModel model_;
  const TokenCorpus &corpus_;
  TrainerOptions options_;
  StagePartition partition_;
  FillPlan plan_;
  PipelineSchedule schedule_;
  PipelineEngine engine_;
  std::unique_ptr<Optimizer> optimizer_;
  std::mt19937_64 rng_;
  std::size_t step_ = 0;
};

}  // namespace exitpipe

#endif  // EXITPIPE_PIPELINE_TRAINER_H_
