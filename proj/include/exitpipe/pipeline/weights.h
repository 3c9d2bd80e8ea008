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

#ifndef EXITPIPE_PIPELINE_WEIGHTS_H_
#define EXITPIPE_PIPELINE_WEIGHTS_H_

#include <cstddef>
#include <string>
#include <vector>

namespace exitpipe {

// Per-exit loss weights as a function of the training step. Evaluated once per iteration,
// so every microbatch of a batch shares the same weights.
class WeightSchedule {
 public:
  enum class Kind { kConstant, kLinear };

  WeightSchedule() = default;
  static WeightSchedule Constant(std::vector<double> weights);
  // Moves from start to end over span steps, then stays at end.
  static WeightSchedule Linear(std::vector<double> start, std::vector<double> end, std::size_t span);

  Kind kind() const { return kind_; }
  const std::vector<double> &start() const { return start_; }
  const std::vector<double> &end() const { return end_; }
  std::size_t span() const { return span_; }
  std::size_t num_exits() const { return start_.size(); }

  std::vector<double> At(std::size_t step) const;

  // "constant:w0,w1,..." or "linear:a0,a1,...->b0,b1,...@span".
  static WeightSchedule Parse(const std::string &text);
  std::string ToString() const;

  bool operator==(const WeightSchedule &) const = default;

 private:
  Kind kind_ = Kind::kConstant;
  std::vector<double> start_, end_;
  std::size_t span_ = 0;
};

}  // namespace exitpipe

#endif  // EXITPIPE_PIPELINE_WEIGHTS_H_
