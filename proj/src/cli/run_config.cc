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


#include "exitpipe/cli/run_config.h"

#include <filesystem>
#include <fstream>
#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "exitpipe/error.h"
#include "exitpipe/model/partition.h"
#include "exitpipe/pipeline/stage.h"
#include "exitpipe/pipeline/weights.h"

namespace exitpipe {
namespace {

constexpr const char *kModelPrefix = "model.";

std::string Trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) {
    return "";
  }
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string FormatList(const std::vector<double> &values) {
  std::string out;
  for (double v : values) {
    out += (out.empty() ? "" : ",") + FormatDouble(v);
  }
  return out;
}

std::vector<double> ParseList(const std::string &text, const std::string &what) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    out.push_back(ParseDouble(Trim(item), what));
  }
  return out;
}

struct Field {
  const char *key;
  std::function<std::string(const RunConfig &)> get;
  std::function<void(RunConfig &, const std::string &)> set;
};

#define SIZE_FIELD(key, member)                                                  \
  Field {                                                                        \
    key, [](const RunConfig &c) { return std::to_string(c.member); },            \
        [](RunConfig &c, const std::string &v) { c.member = ParseSize(v, key); } \
  }
#define DOUBLE_FIELD(key, member)                                                  \
  Field {                                                                          \
    key, [](const RunConfig &c) { return FormatDouble(c.member); },                \
        [](RunConfig &c, const std::string &v) { c.member = ParseDouble(v, key); } \
  }
#define BOOL_FIELD(key, member)                                                         \
  Field {                                                                               \
    key, [](const RunConfig &c) { return std::string(c.member ? "true" : "false"); }, \
        [](RunConfig &c, const std::string &v) { c.member = ParseBool(v, key); }        \
  }
#define STRING_FIELD(key, member) \
  Field { key, [](const RunConfig &c) { return c.member; }, [](RunConfig &c, const std::string &v) { c.member = v; } }

const std::vector<Field> &Fields() {
  static const std::vector<Field> fields = {
      SIZE_FIELD("parallel.stages", num_stages),
      SIZE_FIELD("parallel.microbatch", microbatch),
      SIZE_FIELD("parallel.global_batch", global_batch),
      SIZE_FIELD("parallel.seq_len", seq_len),
      SIZE_FIELD("train.steps", steps),
      STRING_FIELD("train.optimizer", optimizer.kind),
      DOUBLE_FIELD("train.learning_rate", optimizer.learning_rate),
      DOUBLE_FIELD("train.beta1", optimizer.beta1),
      DOUBLE_FIELD("train.beta2", optimizer.beta2),
      DOUBLE_FIELD("train.epsilon", optimizer.epsilon),
      STRING_FIELD("train.weights", weight_schedule),
      BOOL_FIELD("train.fill", fill),
      DOUBLE_FIELD("train.f_over_b", f_over_b),
      BOOL_FIELD("train.defer_exit_forward", defer_exit_forward),
      BOOL_FIELD("train.record_time", record_time),
      Field{"infer.thresholds", [](const RunConfig &c) { return FormatList(c.thresholds); },
            [](RunConfig &c, const std::string &v) { c.thresholds = ParseList(v, "infer.thresholds"); }},
      STRING_FIELD("infer.mode", mode),
      SIZE_FIELD("infer.max_deferred", max_deferred),
      SIZE_FIELD("infer.max_new_tokens", max_new_tokens),
      STRING_FIELD("infer.checkpoint", checkpoint),
      SIZE_FIELD("infer.verify_prompts", verify_prompts),
      STRING_FIELD("data.path", data_path),
      SIZE_FIELD("data.seed", corpus.seed),
      SIZE_FIELD("data.branching", corpus.branching),
      DOUBLE_FIELD("data.determinism", corpus.determinism),
      SIZE_FIELD("data.length", corpus.length),
      DOUBLE_FIELD("analyze.f", cost_f),
      DOUBLE_FIELD("analyze.b", cost_b),
      DOUBLE_FIELD("analyze.f_ee", cost_f_ee),
      DOUBLE_FIELD("analyze.b_ee", cost_b_ee),
      SIZE_FIELD("analyze.microbatches", analyze_microbatches),
      DOUBLE_FIELD("verify.rescale_bias", rescale_bias),
      SIZE_FIELD("seed", seed),
  };
  return fields;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD
#undef STRING_FIELD

}  // namespace

bool RunConfig::operator==(const RunConfig &o) const { return SerializeRunConfig(*this) == SerializeRunConfig(o); }

RunConfig DefaultRunConfig() {
  RunConfig c;
  c.model.num_layers = 8;
  c.model.hidden_dim = 32;
  c.model.num_heads = 4;
  c.model.vocab_size = 32;
  c.model.max_seq_len = 32;
  c.model.exits = {{2, HeadKind::kMinimalistic, 0.25}, {4, HeadKind::kMinimalistic, 0.5}};
  c.model.tie_embeddings = true;
  return c;
}

RunConfig ParseRunConfig(const std::string &text) {
  RunConfig c = DefaultRunConfig();
  std::set<std::string> seen;
  std::stringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string where = "config line " + std::to_string(number);
    const std::string body = Trim(line.substr(0, line.find('#')));
    if (body.empty()) {
      continue;
    }
    const auto eq = body.find('=');
    EXITPIPE_CHECK(eq != std::string::npos, ErrorKind::kParse, where + ": expected key = value");
    const std::string key = Trim(body.substr(0, eq)), value = Trim(body.substr(eq + 1));
    EXITPIPE_CHECK(seen.insert(key).second, ErrorKind::kParse, where + ": repeated key " + key);
    try {
      if (key.rfind(kModelPrefix, 0) == 0) {
        EXITPIPE_CHECK(ApplyConfigKey(c.model, key.substr(6), value), ErrorKind::kParse, "unknown key " + key);
        continue;
      }
      const auto &fields = Fields();
      const auto it = std::find_if(fields.begin(), fields.end(), [&](const Field &f) { return key == f.key; });
      EXITPIPE_CHECK(it != fields.end(), ErrorKind::kParse, "unknown key " + key);
      it->set(c, value);
    } catch (const Error &e) {
      throw Error(ErrorKind::kParse, where + ": " + e.what());
    }
  }
  ValidateRunConfig(c, false);
  return c;
}

RunConfig LoadRunConfig(const std::string &path) {
  RunConfig c = ParseRunConfig(ReadTextFile(path));
  ValidateRunConfig(c, true);
  return c;
}

std::string SerializeRunConfig(const RunConfig &config) {
  std::string out;
  for (const auto &[key, value] : ConfigToKeyValues(config.model)) {
    out += kModelPrefix + key + " = " + value + "\n";
  }
  for (const Field &f : Fields()) {
    out += std::string(f.key) + " = " + f.get(config) + "\n";
  }
  return out;
}

void ValidateRunConfig(const RunConfig &c, bool check_files) {
  ValidateConfig(c.model);
  auto check = [](bool ok, const std::string &what) { EXITPIPE_CHECK(ok, ErrorKind::kInvalidConfig, what); };
  check(c.num_stages >= 1 && c.model.num_layers % c.num_stages == 0,
        "parallel.stages must divide model.num_layers");
  check(c.microbatch >= 1 && c.global_batch >= c.microbatch && c.global_batch % c.microbatch == 0,
        "parallel.global_batch must be a positive multiple of parallel.microbatch");
  check(c.seq_len >= 1 && c.seq_len <= c.model.max_seq_len, "parallel.seq_len must lie in [1, model.max_seq_len]");
  check(c.optimizer.kind == "adam" || c.optimizer.kind == "sgd", "train.optimizer must be adam or sgd");
  check(c.optimizer.learning_rate > 0.0, "train.learning_rate must be positive");
  check(c.f_over_b > 0.0, "train.f_over_b must be positive");
  check(!c.fill || !c.model.tie_embeddings, "train.fill needs untied embeddings");
  check(!c.fill || c.num_microbatches() >= c.num_stages, "train.fill needs at least as many microbatches as stages");
  if (!c.weight_schedule.empty()) {
    check(WeightSchedule::Parse(c.weight_schedule).num_exits() == c.model.num_exits(),
          "train.weights needs one weight per exit, final last");
  }
  check(!c.thresholds.empty(), "infer.thresholds is empty");
  for (double t : c.thresholds) {
    check(t > 0.0 && t <= 1.0, "infer.thresholds must lie in (0, 1]");
  }
  check(c.mode == "pipeline" || c.mode == "recompute" || c.mode == "both", "infer.mode must be pipeline, recompute or both");
  check(c.max_deferred >= 1, "infer.max_deferred must be at least 1");
  check(c.max_new_tokens >= 1, "infer.max_new_tokens must be at least 1");
  check(c.cost_f > 0 && c.cost_b > 0 && c.cost_f_ee > 0 && c.cost_b_ee > 0, "analyze step times must be positive");
  check(c.analyze_microbatches >= 1, "analyze.microbatches must be positive");
  check(c.rescale_bias > 0.0, "verify.rescale_bias must be positive");
  check(c.corpus.branching >= 1 && c.corpus.length >= 2, "data.branching and data.length are too small");
  check(c.corpus.determinism >= 0.0 && c.corpus.determinism <= 1.0, "data.determinism must lie in [0, 1]");
  if (check_files) {
    for (const std::string *path : {&c.data_path, &c.checkpoint}) {
      EXITPIPE_CHECK(path->empty() || std::filesystem::exists(*path), ErrorKind::kIo, "no such file: " + *path);
    }
  }
}

TrainerOptions MakeTrainerOptions(const RunConfig &c) {
  TrainerOptions o;
  o.num_stages = c.num_stages;
  o.microbatch = c.microbatch;
  o.num_microbatches = c.num_microbatches();
  o.seq_len = c.seq_len;
  o.optimizer = c.optimizer;
  if (!c.weight_schedule.empty()) {
    o.weights = WeightSchedule::Parse(c.weight_schedule);
  }
  o.fill = c.fill;
  o.f_over_b = c.f_over_b;
  o.defer_exit_forward = c.defer_exit_forward;
  o.data_seed = c.seed;
  return o;
}

CostModel MakeCostModel(const RunConfig &c) {
  const StagePartition partition = Partition(c.model, c.num_stages);
  CostModel cost;
  cost.num_stages = c.num_stages;
  cost.num_microbatches = c.analyze_microbatches;
  cost.f = c.cost_f;
  cost.b = c.cost_b;
  cost.f_ee = c.cost_f_ee;
  cost.b_ee = c.cost_b_ee;
  cost.memory = TransformerMemoryModel(c.model, c.microbatch, c.seq_len, c.model.num_layers / c.num_stages);
  std::map<std::string, std::size_t> sizes;
  for (const ParamInfo &p : EnumerateParameters(c.model)) {
    std::size_t n = 1;
    for (std::size_t d : p.shape) {
      n *= d;
    }
    sizes[p.name] = n;
  }
  for (const StageLayout &s : partition.stages) {
    cost.early_exits.push_back(s.num_early_exits(c.model));
    double units = 0.0;
    for (const auto *names : {&s.owned, &s.replicas}) {
      for (const std::string &name : *names) {
        units += static_cast<double>(sizes.at(name));
      }
    }
    cost.param_units.push_back(units);
  }
  return cost;
}

TokenCorpus MakeCorpus(const RunConfig &c) {
  if (!c.data_path.empty()) {
    return TokenCorpus::FromFile(c.data_path, c.model.vocab_size);
  }
  return TokenCorpus::Synthetic(c.model.vocab_size, c.corpus);
}

std::string ReadTextFile(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  EXITPIPE_CHECK(in.good(), ErrorKind::kIo, "cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void WriteTextFile(const std::string &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  EXITPIPE_CHECK(out.good(), ErrorKind::kIo, "cannot write " + path);
  out << text;
  EXITPIPE_CHECK(out.good(), ErrorKind::kIo, "write failed for " + path);
}

}  // namespace exitpipe
