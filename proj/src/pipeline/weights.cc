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

#include "exitpipe/pipeline/weights.h"

#include <algorithm>
#include <cmath>

#include "exitpipe/error.h"
#include "exitpipe/model/config.h"

namespace exitpipe {
namespace {

void CheckWeights(const std::vector<double> &w) {
  EXITPIPE_CHECK(!w.empty(), ErrorKind::kInvalidConfig, "weight schedule has no weights");
  for (double x : w) {
    EXITPIPE_CHECK(std::isfinite(x) && x >= 0.0, ErrorKind::kInvalidConfig,
                   "loss weights must be finite and non-negative, got " + FormatDouble(x));
  }
}

std::vector<double> ParseList(const std::string &text) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    out.push_back(ParseDouble(text.substr(pos, comma - pos), "loss weight"));
    pos = comma + 1;
  }
  return out;
}

std::string FormatList(const std::vector<double> &w) {
  std::string out;
  for (std::size_t i = 0; i < w.size(); ++i) {
    out += (i ? "," : "") + FormatDouble(w[i]);
  }
  return out;
}

}  // namespace

WeightSchedule WeightSchedule::Constant(std::vector<double> weights) {
  CheckWeights(weights);
  WeightSchedule s;
  s.start_ = weights;
  s.end_ = std::move(weights);
  return s;
}

WeightSchedule WeightSchedule::Linear(std::vector<double> start, std::vector<double> end, std::size_t span) {
  CheckWeights(start);
  CheckWeights(end);
  EXITPIPE_CHECK(start.size() == end.size(), ErrorKind::kInvalidConfig,
                 "linear schedule start and end have different lengths");
  WeightSchedule s;
  s.kind_ = Kind::kLinear;
  s.start_ = std::move(start);
  s.end_ = std::move(end);
  s.span_ = span;
  return s;
}

std::vector<double> WeightSchedule::At(std::size_t step) const {
  if (kind_ == Kind::kConstant || step >= span_) {
    return end_;
  }
  const double t = static_cast<double>(step) / static_cast<double>(span_);
  std::vector<double> out(start_.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = start_[i] + (end_[i] - start_[i]) * t;
  }
  return out;
}

WeightSchedule WeightSchedule::Parse(const std::string &text) {
  const std::size_t colon = text.find(':');
  EXITPIPE_CHECK(colon != std::string::npos, ErrorKind::kParse, "weight schedule '" + text + "' has no kind");
  const std::string kind = text.substr(0, colon), body = text.substr(colon + 1);
  if (kind == "constant") {
    return Constant(ParseList(body));
  }
  EXITPIPE_CHECK(kind == "linear", ErrorKind::kParse, "unknown weight schedule kind '" + kind + "'");
  const std::size_t arrow = body.find("->"), at = body.rfind('@');
  EXITPIPE_CHECK(arrow != std::string::npos && at != std::string::npos && at > arrow, ErrorKind::kParse,
                 "linear schedule must look like a,b->c,d@span");
  return Linear(ParseList(body.substr(0, arrow)), ParseList(body.substr(arrow + 2, at - arrow - 2)),
                ParseSize(body.substr(at + 1), "schedule span"));
}

std::string WeightSchedule::ToString() const {
  if (kind_ == Kind::kConstant) {
    return "constant:" + FormatList(end_);
  }
  return "linear:" + FormatList(start_) + "->" + FormatList(end_) + "@" + std::to_string(span_);
}

}  // namespace exitpipe
