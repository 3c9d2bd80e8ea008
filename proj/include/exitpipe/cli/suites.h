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


#ifndef EXITPIPE_CLI_SUITES_H_
#define EXITPIPE_CLI_SUITES_H_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "exitpipe/cli/run_config.h"
#include "exitpipe/model/model.h"

namespace exitpipe {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// "PASS  3 schedule-identities (0.1 s): detail"
std::string FormatCriterion(const CriterionResult &result);
// One JSON object per line.
std::string CriterionJson(const CriterionResult &result);

// 1. Pipeline gradients against the single-device oracle on random configs with up to
//    max_stages stages: relative error <= 1e-9, bitwise for one stage.
CriterionResult CheckGradientEquivalence(std::size_t max_stages, std::size_t configs, std::uint64_t seed);
// 2. Every op kind against central differences, `trials` random cases each.
CriterionResult CheckFiniteDifferences(std::size_t trials, std::uint64_t seed);
// 3. Span overheads of exits on the reference preset, and the brute-force path oracle.
CriterionResult CheckScheduleIdentities(std::uint64_t seed);
// 4. Logit memory closed forms, unchanged peak with deferred middle exits, and replay of
//    executed iterations on up to max_stages stages.
CriterionResult CheckMemoryIdentities(std::size_t max_stages, std::uint64_t seed);
// 5. Fill plan closed forms against measured bubbles; filled spans never longer.
CriterionResult CheckBubbleFill();
// 6. Monte Carlo estimator statistics, then filled against plain iterations on the linear
//    toy. rescale_bias != 1 injects a wrong rescaling factor, which must fail.
CriterionResult CheckEstimator(std::size_t trials, std::size_t fill_iterations, double rescale_bias,
                               std::uint64_t seed);

struct InferenceCheck {
  std::size_t num_stages = 4;
  std::size_t prompts = 20;
  std::size_t prompt_length = 4;
  std::size_t max_new_tokens = 16;
  std::size_t max_deferred = 4;
  std::vector<double> thresholds{1.0, 0.95, 0.9, 0.8};
  std::uint64_t seed = 1;
};
// 7. Mode equivalence, baseline reduction and KV completeness on `model` with prompts cut
//    from `corpus_tokens`, plus the per-token speedup bound of the latency model.
CriterionResult CheckInference(const EarlyExitModel &model, const std::vector<int> &corpus_tokens,
                               const InferenceCheck &check);

// Per-step exit losses of a training run, final exit last.
struct TrainingCurve {
  std::vector<std::vector<double>> losses;
};
// 8. Trains per the config. Every exit's 100-step block means must strictly decrease, and at
//    the end each early exit's block mean must be at least the final exit's minus 0.05.
//    The trained model is written to *trained when given.
CriterionResult CheckConvergence(const RunConfig &config, EarlyExitModel *trained);
// The convergence rule on its own.
bool ConvergenceHolds(const TrainingCurve &curve, std::size_t block, double slack, std::string *detail);

// Runs all eight criteria for a run config, calling on_result as each one finishes. P = 1
// keeps the pipeline suites to one stage.
std::vector<CriterionResult> RunAllCriteria(const RunConfig &config,
                                            const std::function<void(const CriterionResult &)> &on_result = {});

}  // namespace exitpipe

#endif  // EXITPIPE_CLI_SUITES_H_
