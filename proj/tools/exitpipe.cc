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


#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "exitpipe/cli/commands.h"
#include "exitpipe/cli/run_config.h"
#include "exitpipe/error.h"

namespace {

exitpipe::RunConfig Load(const std::string &path) {
  return path.empty() ? exitpipe::DefaultRunConfig() : exitpipe::LoadRunConfig(path);
}

std::vector<std::string> SplitCommas(const std::string &text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) {
      out.push_back(item);
    }
  }
  return out;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Pipeline-parallel early-exit transformer training, schedule analysis and inference"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("-c,--config", config_path, "Run config file (key = value lines); built-in defaults if omitted")
      ->check(CLI::ExistingFile);

  auto *train = app.add_subcommand("train", "Train and write per-step, per-exit losses");
  std::string metrics = "metrics.jsonl", checkpoint_out;
  train->add_option("--metrics", metrics, "Metrics output (one JSON record per line)")->capture_default_str();
  train->add_option("--checkpoint-out", checkpoint_out, "Save the trained model here");

  auto *analyze = app.add_subcommand("analyze-schedule", "Simulate 1F1B variants and print a summary table");
  std::string variants = "standard,eager,deferred,reordered", out_dir;
  analyze->add_option("--variants", variants, "Comma-separated: standard, eager, deferred, reordered, fill")
      ->capture_default_str();
  analyze->add_option("--out-dir", out_dir, "Write <variant>.jsonl and <variant>.svg timelines here");

  auto *generate = app.add_subcommand("generate", "Early-exit greedy decoding of one prompt");
  std::string checkpoint, prompt, mode;
  double threshold = 0.0;
  std::size_t max_new = 0, max_deferred = 0;
  generate->add_option("--checkpoint", checkpoint, "Model checkpoint (overrides infer.checkpoint)");
  generate->add_option("--prompt", prompt, "Prompt token ids, space or comma separated")->required();
  auto *threshold_opt = generate->add_option("--threshold", threshold, "Confidence threshold in (0, 1]");
  generate->add_option("--mode", mode, "pipeline, recompute or both (default: infer.mode)");
  auto *max_new_opt = generate->add_option("--max-new-tokens", max_new, "Tokens to generate");
  auto *max_deferred_opt = generate->add_option("--max-deferred", max_deferred, "Recompute-mode deferral cap");

  auto *verify = app.add_subcommand("verify", "Run the acceptance suites; nonzero exit on any failure");
  bool json = false;
  verify->add_flag("--json", json, "One JSON record per criterion");

  auto *show = app.add_subcommand("show-config", "Print the effective config in canonical form");

  CLI11_PARSE(app, argc, argv);
  try {
    exitpipe::RunConfig config = Load(config_path);
    if (*train) {
      exitpipe::RunTrain(config, metrics, checkpoint_out, std::cerr);
    } else if (*analyze) {
      exitpipe::RunAnalyze(config, SplitCommas(variants), out_dir, std::cout);
    } else if (*generate) {
      if (!checkpoint.empty()) {
        config.checkpoint = checkpoint;
      }
      exitpipe::GenerateRequest request;
      request.prompt = exitpipe::ParseTokenList(prompt);
      request.mode = mode;
      if (*threshold_opt) {
        request.threshold = threshold;
      }
      if (*max_new_opt) {
        request.max_new_tokens = max_new;
      }
      if (*max_deferred_opt) {
        request.max_deferred = max_deferred;
      }
      exitpipe::RunGenerate(config, request, std::cout);
    } else if (*verify) {
      return exitpipe::RunVerify(config, json, std::cout);
    } else if (*show) {
      std::cout << exitpipe::SerializeRunConfig(config);
    }
  } catch (const exitpipe::Error &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
