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

#ifndef EXITPIPE_PIPELINE_LINEAR_TOY_H_
#define EXITPIPE_PIPELINE_LINEAR_TOY_H_

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "exitpipe/model/model.h"
#include "exitpipe/pipeline/stage.h"

namespace exitpipe {

// Deep linear network with squared-error exits: stage r maps x to x W_r, and an exit on
// stage r predicts y_j from that output as x W_r A_r. Small enough for hand derivatives
// and fast enough for Monte Carlo checks of the fill estimator.
struct LinearToy {
  std::size_t num_stages = 0;
  std::size_t dim = 0;
  std::size_t rows = 0;  // samples per microbatch
  std::vector<bool> stage_has_exit;  // the last stage always has one
  ParameterMap params;               // "toy.W<r>" [dim, dim], "toy.A<r>" [dim, 1]

  std::size_t num_exits() const;
  // Stage of exit j, exits numbered by depth.
  std::size_t exit_stage(std::size_t j) const;
};

struct LinearSample {
  Tensor x;                     // [rows, dim]
  std::vector<Tensor> targets;  // per exit, [rows, 1]
};

LinearToy MakeLinearToy(std::size_t num_stages, std::size_t dim, std::size_t rows, std::vector<bool> stage_has_exit,
                        std::uint64_t seed);

// i.i.d. samples: x ~ N(0, I), y_j = x c_j + noise with fixed c_j and unit-variance noise.
std::vector<LinearSample> DrawLinearSamples(const LinearToy &toy, std::size_t count, std::mt19937_64 &rng);

class LinearToyStage : public StageProgram {
 public:
  LinearToyStage(const LinearToy &toy, std::size_t stage, std::span<const LinearSample> samples);

  std::size_t num_exits() const override { return exit_ < 0 ? 0 : 1; }
  std::size_t exit_index(std::size_t) const override { return static_cast<std::size_t>(exit_); }
  StageForward Forward(Tape &tape, const ParamLookup &p, std::size_t sample, Var input) const override;
  Var Head(Tape &tape, const ParamLookup &p, std::size_t k, Var tap) const override;
  Var Loss(Tape &tape, std::size_t sample, std::size_t k, Var head_output) const override;
  double ActivationUnits() const override;

 private:
  const LinearToy &toy_;
  std::size_t stage_;
  long exit_ = -1;
  std::span<const LinearSample> samples_;
};

// Parameters of one toy stage.
ParameterMap LinearToyStageParams(const LinearToy &toy, std::size_t stage);

// Gradient of (1 / batches) sum_mb sum_j w_j L_j on a single tape per microbatch.
GradientMap LinearToyGradients(const LinearToy &toy, std::span<const LinearSample> samples,
                               std::span<const double> weights);

}  // namespace exitpipe

#endif  // EXITPIPE_PIPELINE_LINEAR_TOY_H_
