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

#include "exitpipe/pipeline/linear_toy.h"

#include <cmath>
#include <string>

#include "exitpipe/error.h"
#include "exitpipe/tensor/ops.h"

namespace exitpipe {
namespace {

std::string WeightName(std::size_t r) { return "toy.W" + std::to_string(r); }
std::string HeadName(std::size_t r) { return "toy.A" + std::to_string(r); }

Tensor Gaussian(Shape shape, double stddev, double mean, std::mt19937_64 &rng) {
  std::normal_distribution<double> normal(mean, stddev);
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> data(n);
  for (double &v : data) v = normal(rng);
  return Tensor(std::move(shape), std::move(data));
}

Var SquaredError(Tape &tape, Var prediction, const Tensor &target) {
  Tensor negated = target;
  for (double &v : negated.mutable_data()) v = -v;
  const Var d = ops::Add(tape, prediction, tape.Constant(std::move(negated)));
  return ops::Scale(tape, ops::Sum(tape, ops::Mul(tape, d, d)), 0.5);
}

}  // namespace

std::size_t LinearToy::num_exits() const {
  std::size_t n = 0;
  for (bool e : stage_has_exit) n += e ? 1 : 0;
  return n;
}

std::size_t LinearToy::exit_stage(std::size_t j) const {
  for (std::size_t r = 0; r < num_stages; ++r) {
    if (stage_has_exit[r] && j-- == 0) return r;
  }
  throw Error(ErrorKind::kInvalidArgument, "exit " + std::to_string(j) + " out of range");
}

LinearToy MakeLinearToy(std::size_t num_stages, std::size_t dim, std::size_t rows, std::vector<bool> stage_has_exit,
                        std::uint64_t seed) {
  EXITPIPE_CHECK(num_stages >= 1 && dim >= 1 && rows >= 1, ErrorKind::kInvalidArgument, "empty toy model");
  EXITPIPE_CHECK(stage_has_exit.size() == num_stages, ErrorKind::kInvalidArgument, "one exit flag per stage");
  stage_has_exit.back() = true;
  LinearToy toy{num_stages, dim, rows, std::move(stage_has_exit), {}};
  std::mt19937_64 rng(seed);
  // Near-identity maps keep activations of order one at any depth.
  for (std::size_t r = 0; r < num_stages; ++r) {
    Tensor w = Gaussian({dim, dim}, 0.3 / std::sqrt(static_cast<double>(dim)), 0.0, rng);
    for (std::size_t i = 0; i < dim; ++i) w.mutable_data()[i * dim + i] += 1.0;
    toy.params.emplace(WeightName(r), std::move(w));
    if (toy.stage_has_exit[r]) {
      toy.params.emplace(HeadName(r), Gaussian({dim, 1}, 1.0 / std::sqrt(static_cast<double>(dim)), 0.0, rng));
    }
  }
  return toy;
}

std::vector<LinearSample> DrawLinearSamples(const LinearToy &toy, std::size_t count, std::mt19937_64 &rng) {
  // The coefficients depend only on the toy's shape so every draw shares them.
  std::mt19937_64 coeff_rng(toy.dim * 7919 + toy.num_stages);
  std::vector<Tensor> coeffs;
  for (std::size_t j = 0; j < toy.num_exits(); ++j) {
    coeffs.push_back(Gaussian({toy.dim, 1}, 1.0, 0.0, coeff_rng));
  }
  std::vector<LinearSample> out;
  for (std::size_t n = 0; n < count; ++n) {
    LinearSample s;
    s.x = Gaussian({toy.rows, toy.dim}, 1.0, 0.0, rng);
    for (const Tensor &c : coeffs) {
      Tensor y = Gaussian({toy.rows, 1}, 1.0, 0.0, rng);
      for (std::size_t i = 0; i < toy.rows; ++i) {
        for (std::size_t k = 0; k < toy.dim; ++k) {
          y.mutable_data()[i] += s.x.data()[i * toy.dim + k] * c.data()[k];
        }
      }
      s.targets.push_back(std::move(y));
    }
    out.push_back(std::move(s));
  }
  return out;
}

LinearToyStage::LinearToyStage(const LinearToy &toy, std::size_t stage, std::span<const LinearSample> samples)
    : toy_(toy), stage_(stage), samples_(samples) {
  EXITPIPE_CHECK(stage < toy.num_stages, ErrorKind::kInvalidArgument, "stage out of range");
  if (toy.stage_has_exit[stage]) {
    long j = 0;
    for (std::size_t r = 0; r < stage; ++r) j += toy.stage_has_exit[r] ? 1 : 0;
    exit_ = j;
  }
}

StageForward LinearToyStage::Forward(Tape &tape, const ParamLookup &p, std::size_t sample, Var input) const {
  EXITPIPE_CHECK(sample < samples_.size(), ErrorKind::kInvalidArgument, "no sample " + std::to_string(sample));
  const Var x = stage_ == 0 ? tape.Constant(samples_[sample].x) : input;
  EXITPIPE_CHECK(x.valid(), ErrorKind::kInvalidArgument, "stage needs an input");
  StageForward out;
  out.output = ops::Matmul(tape, x, p(WeightName(stage_)));
  if (exit_ >= 0) out.taps.push_back(out.output);
  return out;
}

Var LinearToyStage::Head(Tape &tape, const ParamLookup &p, std::size_t, Var tap) const {
  return ops::Matmul(tape, tap, p(HeadName(stage_)));
}

Var LinearToyStage::Loss(Tape &tape, std::size_t sample, std::size_t, Var prediction) const {
  return SquaredError(tape, prediction, samples_[sample].targets.at(static_cast<std::size_t>(exit_)));
}

double LinearToyStage::ActivationUnits() const { return static_cast<double>(toy_.rows * toy_.dim); }

ParameterMap LinearToyStageParams(const LinearToy &toy, std::size_t stage) {
  ParameterMap out;
  out.emplace(WeightName(stage), toy.params.at(WeightName(stage)));
  if (toy.stage_has_exit[stage]) out.emplace(HeadName(stage), toy.params.at(HeadName(stage)));
  return out;
}

GradientMap LinearToyGradients(const LinearToy &toy, std::span<const LinearSample> samples,
                               std::span<const double> weights) {
  EXITPIPE_CHECK(weights.size() == toy.num_exits(), ErrorKind::kInvalidArgument, "one weight per exit");
  GradientMap acc;
  for (const auto &[name, t] : toy.params) acc.emplace(name, std::vector<double>(t.numel(), 0.0));
  for (const LinearSample &s : samples) {
    Tape tape;
    const ParamLookup p = LeafLookup(tape, toy.params);
    Var x = tape.Constant(s.x);
    std::vector<Var> losses;
    for (std::size_t r = 0; r < toy.num_stages; ++r) {
      x = ops::Matmul(tape, x, p(WeightName(r)));
      if (toy.stage_has_exit[r]) {
        losses.push_back(SquaredError(tape, ops::Matmul(tape, x, p(HeadName(r))), s.targets.at(losses.size())));
      }
    }
    const Var total =
        ops::Scale(tape, graph::WeightedSum(tape, losses, weights), 1.0 / static_cast<double>(samples.size()));
    for (const auto &[name, g] : tape.Backward(total)) {
      auto &a = acc.at(name);
      for (std::size_t i = 0; i < g.size(); ++i) a[i] += g[i];
    }
  }
  return acc;
}

}  // namespace exitpipe
