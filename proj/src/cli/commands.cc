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


#include "exitpipe/cli/commands.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "exitpipe/cli/suites.h"
#include "exitpipe/error.h"
#include "exitpipe/infer/generate.h"
#include "exitpipe/model/checkpoint.h"
#include "json.hpp"

namespace exitpipe {
namespace {

std::string Num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string Row(const std::vector<double> &v) {
  std::string out;
  for (double x : v) {
    out += (out.empty() ? "" : "/") + Num(x);
  }
  return out;
}

nlohmann::ordered_json TokenJson(const TokenRecord &r, const std::string &mode) {
  nlohmann::ordered_json j;
  j["mode"] = mode;
  j["position"] = r.position;
  j["token"] = r.token;
  j["exit"] = r.exit;
  j["exit_layer"] = r.exit_layer;
  j["exit_stage"] = r.exit_stage;
  j["confidence"] = r.confidences.back();
  j["confidences"] = r.confidences;
  j["latency"] = r.latency;
  return j;
}

nlohmann::ordered_json SummaryJson(const GenerationTrace &t, const std::string &mode, double threshold) {
  nlohmann::ordered_json j;
  j["mode"] = mode;
  j["summary"] = true;
  j["threshold"] = threshold;
  j["tokens"] = t.token_ids();
  j["early_exits"] = t.early_exits();
  j["mean_exit_layer"] = t.mean_exit_layer();
  j["latency"] = t.total_latency;
  j["baseline_latency"] = t.baseline_latency;
  j["speedup"] = t.speedup();
  j["kv_complete"] = t.kv_complete;
  if (mode == "recompute") {
    j["passes"] = t.passes;
    j["forced_full_passes"] = t.forced_full_passes;
    j["max_pass_batch"] = t.max_pass_batch;
  }
  return j;
}

}  // namespace

void RunTrain(const RunConfig &config, const std::string &metrics_path, const std::string &checkpoint_path,
              std::ostream &log) {
  ValidateRunConfig(config, true);
  const TokenCorpus corpus = MakeCorpus(config);
  Trainer trainer(BuildModel(config.model, config.seed), corpus, MakeTrainerOptions(config));

  std::ofstream out(metrics_path, std::ios::binary);
  EXITPIPE_CHECK(out.good(), ErrorKind::kIo, "cannot write " + metrics_path);
  nlohmann::ordered_json header;
  std::vector<std::size_t> layers;
  for (std::size_t j = 0; j < config.model.num_exits(); ++j) {
    layers.push_back(config.model.exit_layer(j));
  }
  header["header"] = true;
  header["exit_layers"] = layers;
  header["stages"] = config.num_stages;
  header["steps"] = config.steps;
  header["seed"] = config.seed;
  out << header.dump() << '\n';

  for (std::size_t s = 0; s < config.steps; ++s) {
    const StepMetrics m = trainer.Step();
    for (double loss : m.exit_losses) {
      EXITPIPE_CHECK(std::isfinite(loss), ErrorKind::kNonFinite,
                     "non-finite loss at step " + std::to_string(m.step));
    }
    out << MetricsJsonLine(m, config.record_time) << '\n';
    if ((s + 1) % 50 == 0 || s + 1 == config.steps) {
      log << "step " << s + 1 << "/" << config.steps << " losses " << Row(m.exit_losses) << '\n';
    }
  }
  out.flush();
  EXITPIPE_CHECK(out.good(), ErrorKind::kIo, "write failed: " + metrics_path);
  if (!checkpoint_path.empty()) {
    SaveCheckpoint(checkpoint_path, trainer.model(), {{"step", std::to_string(trainer.step())}});
    log << "saved " << checkpoint_path << '\n';
  }
}

const std::vector<std::string> &AnalyzeVariants() {
  static const std::vector<std::string> names{"standard", "eager", "deferred", "reordered", "fill"};
  return names;
}

void RunAnalyze(const RunConfig &config, const std::vector<std::string> &variants, const std::string &out_dir,
                std::ostream &out) {
  ValidateRunConfig(config, false);
  for (const std::string &v : variants) {
    EXITPIPE_CHECK(std::find(AnalyzeVariants().begin(), AnalyzeVariants().end(), v) != AnalyzeVariants().end(),
                   ErrorKind::kInvalidArgument, "unknown variant '" + v + "'");
  }
  RunConfig plain = config;
  plain.model.exits.clear();
  const CostModel standard_cost = MakeCostModel(plain);
  const CostModel cost = MakeCostModel(config);
  const Timeline standard = Simulate(standard_cost, ExitMode::kStandard);

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
  }
  out << "variant    span      d_span    busy                      idle                      "
         "peak_memory                           d_peak_max\n";
  for (const std::string &v : variants) {
    Timeline t;
    if (v == "standard") {
      t = standard;
    } else if (v == "eager") {
      t = Simulate(cost, ExitMode::kEager);
    } else if (v == "deferred") {
      t = Simulate(cost, ExitMode::kDeferred);
    } else if (v == "reordered") {
      t = Simulate(cost, ExitMode::kDeferredReordered);
    } else {
      std::vector<bool> has(cost.num_stages);
      for (std::size_t r = 0; r < cost.num_stages; ++r) {
        has[r] = cost.early_exits[r] > 0 || r + 1 == cost.num_stages;
      }
      t = Simulate(cost, ExitMode::kDeferred,
                   RestrictPart1ToExits(PlanBubbleFill(cost.num_stages, config.f_over_b), has));
    }
    if (!out_dir.empty()) {
      const std::filesystem::path dir(out_dir);
      WriteTextFile((dir / (v + ".jsonl")).string(), TimelineToJsonLines(t));
      WriteTextFile((dir / (v + ".svg")).string(), TimelineToSvg(t));
    }
    std::vector<double> idle;
    for (double busy : t.busy) {
      idle.push_back(t.span - busy);
    }
    char line[512];
    std::snprintf(line, sizeof line, "%-10s %-9s %-9s %-25s %-25s %-37s %s\n", v.c_str(), Num(t.span).c_str(),
                  Num(t.span - standard.span).c_str(), Row(t.busy).c_str(), Row(idle).c_str(),
                  Row(t.peak_memory).c_str(), Num(t.max_peak_memory() - standard.max_peak_memory()).c_str());
    out << line;
  }
}

std::vector<int> ParseTokenList(const std::string &text) {
  std::string spaced = text;
  std::replace(spaced.begin(), spaced.end(), ',', ' ');
  std::istringstream in(spaced);
  std::vector<int> out;
  std::string word;
  while (in >> word) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(word, &used);
    } catch (const std::exception &) {
      used = 0;
    }
    EXITPIPE_CHECK(used == word.size(), ErrorKind::kParse, "bad token id '" + word + "'");
    out.push_back(v);
  }
  return out;
}

void RunGenerate(const RunConfig &config, const GenerateRequest &request, std::ostream &out) {
  ValidateRunConfig(config, true);
  EXITPIPE_CHECK(!config.checkpoint.empty(), ErrorKind::kInvalidConfig, "generate needs infer.checkpoint");
  const EarlyExitModel model = LoadCheckpoint(config.checkpoint).model;
  const std::string mode = request.mode.empty() ? config.mode : request.mode;
  EXITPIPE_CHECK(mode == "pipeline" || mode == "recompute" || mode == "both", ErrorKind::kInvalidArgument,
                 "unknown mode '" + mode + "'");
  GenerateOptions options;
  options.threshold = request.threshold.value_or(config.thresholds.front());
  options.num_stages = config.num_stages;
  options.max_new_tokens = request.max_new_tokens.value_or(config.max_new_tokens);
  options.max_deferred = request.max_deferred.value_or(config.max_deferred);

  std::vector<std::pair<std::string, GenerationTrace>> traces;
  if (mode != "recompute") {
    traces.emplace_back("pipeline", GeneratePipeline(model, request.prompt, options));
  }
  if (mode != "pipeline") {
    traces.emplace_back("recompute", GenerateRecompute(model, request.prompt, options));
  }
  for (const auto &[name, trace] : traces) {
    for (const TokenRecord &r : trace.tokens) {
      out << TokenJson(r, name).dump() << '\n';
    }
    out << SummaryJson(trace, name, options.threshold).dump() << '\n';
  }
  if (traces.size() == 2) {
    EXITPIPE_CHECK(traces[0].second.token_ids() == traces[1].second.token_ids(), ErrorKind::kInternal,
                   "pipeline and recompute modes emitted different tokens");
  }
}

int RunVerify(const RunConfig &config, bool json, std::ostream &out) {
  ValidateRunConfig(config, true);
  const auto results = RunAllCriteria(config, [&](const CriterionResult &r) {
    out << (json ? CriterionJson(r) : FormatCriterion(r)) << std::endl;
  });
  for (const CriterionResult &r : results) {
    if (!r.passed) {
      return 1;
    }
  }
  return 0;
}

}  // namespace exitpipe
