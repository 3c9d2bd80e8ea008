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

#include "exitpipe/schedule/latency.h"

#include <algorithm>
#include <numeric>
#include <string>

#include "exitpipe/error.h"

namespace exitpipe {

std::vector<double> InferenceLatency::PerTokenSpeedup() const {
  std::vector<double> out(pipeline.size());
  for (std::size_t t = 0; t < out.size(); ++t) {
    out[t] = sequential[t] / pipeline[t];
  }
  return out;
}

InferenceLatency ModelInferenceLatency(const std::vector<std::size_t> &exit_stages,
                                       const std::vector<double> &stage_times) {
  const std::size_t P = stage_times.size();
  EXITPIPE_CHECK(P >= 1, ErrorKind::kInvalidArgument, "latency model needs at least one stage");
  for (double t : stage_times) {
    EXITPIPE_CHECK(t > 0.0, ErrorKind::kInvalidArgument, "stage times must be positive");
  }
  const double full = std::accumulate(stage_times.begin(), stage_times.end(), 0.0);
  InferenceLatency out;
  std::vector<double> stage_free(P, 0.0);
  double last_emit = 0.0;
  for (std::size_t t = 0; t < exit_stages.size(); ++t) {
    const std::size_t exit = exit_stages[t];
    EXITPIPE_CHECK(exit >= 1 && exit <= P, ErrorKind::kInvalidArgument,
                   "token " + std::to_string(t) + " exits at stage " + std::to_string(exit));
    double ready = last_emit;
    double emit = 0.0;
    for (std::size_t s = 0; s < P; ++s) {
      const double start = std::max(ready, stage_free[s]);
      ready = start + stage_times[s];
      stage_free[s] = ready;
      if (s + 1 == exit) {
        emit = ready;
      }
    }
    out.pipeline.push_back(emit - last_emit);
    out.sequential.push_back(full);
    last_emit = emit;
  }
  out.pipeline_total = last_emit;
  out.sequential_total = full * static_cast<double>(exit_stages.size());
  return out;
}

}  // namespace exitpipe
