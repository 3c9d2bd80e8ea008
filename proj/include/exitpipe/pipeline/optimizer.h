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

#ifndef EXITPIPE_PIPELINE_OPTIMIZER_H_
#define EXITPIPE_PIPELINE_OPTIMIZER_H_

#include <cstddef>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "exitpipe/model/model.h"

namespace exitpipe {

struct OptimizerConfig {
  std::string kind = "adam";  // "sgd" or "adam"
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  // Updates every parameter that has a gradient. Throws kShapeMismatch on a size mismatch.
  virtual void Step(ParameterMap &params, const GradientMap &grads) = 0;
};

std::unique_ptr<Optimizer> MakeOptimizer(const OptimizerConfig &config);

}  // namespace exitpipe

#endif  // EXITPIPE_PIPELINE_OPTIMIZER_H_
