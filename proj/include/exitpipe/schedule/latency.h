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

#ifndef EXITPIPE_SCHEDULE_LATENCY_H_
#define EXITPIPE_SCHEDULE_LATENCY_H_

#include <cstddef>
#include <vector>

namespace exitpipe {

struct InferenceLatency {
  // Time between consecutive emitted tokens (the first is measured from time 0).
  std::vector<double> pipeline;
  std::vector<double> sequential;
  double pipeline_total = 0.0;
  double sequential_total = 0.0;

  // sequential[t] / pipeline[t]
  std::vector<double> PerTokenSpeedup() const;
  double TotalSpeedup() const { return pipeline_total > 0.0 ? sequential_total / pipeline_total : 1.0; }
};

// Pipeline-based early-exit decoding on P stages. Token t is emitted at the end of its exit
// stage (1-based exit_stages[t]) and the next token enters stage 1 right then, while the
// stages after the exit keep filling the KV cache of token t. Every stage handles tokens in
// position order. The sequential mode runs each token through all stages before the next.
// Throws kInvalidArgument for an exit stage outside [1, P] or a non-positive stage time.
InferenceLatency ModelInferenceLatency(const std::vector<std::size_t> &exit_stages,
                                       const std::vector<double> &stage_times);

}  // namespace exitpipe

#endif  // EXITPIPE_SCHEDULE_LATENCY_H_
