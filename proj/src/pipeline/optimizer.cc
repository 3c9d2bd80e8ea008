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

#include "exitpipe/pipeline/optimizer.h"

#include <cmath>

#include "exitpipe/error.h"

namespace exitpipe {
namespace {

std::span<double> Target(ParameterMap &params, const std::string &name, std::size_t size) {
  auto it = params.find(name);
  EXITPIPE_CHECK(it != params.end(), ErrorKind::kInvalidArgument, "gradient for unknown parameter '" + name + "'");
  EXITPIPE_CHECK(it->second.numel() == size, ErrorKind::kShapeMismatch, "gradient size mismatch for '" + name + "'");
  return it->second.mutable_data();
}

class Sgd : public Optimizer {
 public:
  explicit Sgd(double lr) : lr_(lr) {}
  void Step(ParameterMap &params, const GradientMap &grads) override {
    for (const auto &[name, g] : grads) {
      auto w = Target(params, name, g.size());
      for (std::size_t i = 0; i < g.size(); ++i) w[i] -= lr_ * g[i];
    }
  }

 private:
  double lr_;
};

class Adam : public Optimizer {
 public:
  explicit Adam(const OptimizerConfig &c) : c_(c) {}
  void Step(ParameterMap &params, const GradientMap &grads) override {
    ++t_;
    const double c1 = 1.0 - std::pow(c_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(c_.beta2, static_cast<double>(t_));
    for (const auto &[name, g] : grads) {
      auto w = Target(params, name, g.size());
      auto &m = m_[name], &v = v_[name];
      m.resize(g.size(), 0.0);
      v.resize(g.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = c_.beta1 * m[i] + (1.0 - c_.beta1) * g[i];
        v[i] = c_.beta2 * v[i] + (1.0 - c_.beta2) * g[i] * g[i];
        w[i] -= c_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + c_.epsilon);
      }
    }
  }

 private:
  OptimizerConfig c_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace

std::unique_ptr<Optimizer> MakeOptimizer(const OptimizerConfig &config) {
  EXITPIPE_CHECK(std::isfinite(config.learning_rate) && config.learning_rate > 0.0, ErrorKind::kInvalidConfig,
                 "learning rate must be positive");
  if (config.kind == "sgd") {
    return std::make_unique<Sgd>(config.learning_rate);
  }
  EXITPIPE_CHECK(config.kind == "adam", ErrorKind::kInvalidConfig, "unknown optimizer '" + config.kind + "'");
  EXITPIPE_CHECK(config.beta1 >= 0.0 && config.beta1 < 1.0 && config.beta2 >= 0.0 && config.beta2 < 1.0 &&
                     config.epsilon > 0.0,
                 ErrorKind::kInvalidConfig, "Adam needs betas in [0, 1) and a positive epsilon");
  return std::make_unique<Adam>(config);
}

}  // namespace exitpipe
