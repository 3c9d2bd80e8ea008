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


#include "exitpipe/infer/generate.h"

#include <algorithm>
#include <memory>
#include <optional>

#include "exitpipe/error.h"
#include "exitpipe/infer/decoder.h"
#include "exitpipe/model/partition.h"
#include "exitpipe/pipeline/channel.h"
#include "exitpipe/pipeline/worker_pool.h"
#include "exitpipe/schedule/latency.h"

namespace exitpipe {
namespace {

using Clock = std::chrono::steady_clock;

double Seconds(Clock::time_point since) { return std::chrono::duration<double>(Clock::now() - since).count(); }

// Number of positions whose KV a request computes; checks the request on the way.
std::size_t CheckRequest(const ModelConfig &config, std::span<const int> prompt, const GenerateOptions &options) {
  EXITPIPE_CHECK(!prompt.empty(), ErrorKind::kInvalidArgument, "prompt is empty");
  EXITPIPE_CHECK(options.max_new_tokens >= 1, ErrorKind::kInvalidArgument, "max_new_tokens must be at least 1");
  EXITPIPE_CHECK(options.threshold > 0.0 && options.threshold <= 1.0, ErrorKind::kInvalidArgument,
                 "exit threshold must lie in (0, 1]");
  EXITPIPE_CHECK(options.max_deferred >= 1, ErrorKind::kInvalidArgument, "max_deferred must be at least 1");
  for (int t : prompt) {
    EXITPIPE_CHECK(t >= 0 && static_cast<std::size_t>(t) < config.vocab_size, ErrorKind::kInvalidToken,
                   "prompt token " + std::to_string(t) + " outside vocabulary");
  }
  const std::size_t positions = prompt.size() + options.max_new_tokens - 1;
  EXITPIPE_CHECK(positions <= config.max_seq_len, ErrorKind::kContextOverflow,
                 "prompt of " + std::to_string(prompt.size()) + " plus " + std::to_string(options.max_new_tokens) +
                     " new tokens exceeds max_seq_len " + std::to_string(config.max_seq_len));
  return positions;
}

std::vector<double> StageTimes(const ModelConfig &config, const GenerateOptions &options) {
  const std::size_t P = options.num_stages;
  if (options.stage_times.empty()) {
    return std::vector<double>(P, static_cast<double>(config.num_layers / P));
  }
  EXITPIPE_CHECK(options.stage_times.size() == P, ErrorKind::kInvalidArgument, "need one stage time per stage");
  return options.stage_times;
}

TokenRecord MakeRecord(const ModelConfig &config, std::size_t num_stages, std::size_t position,
                       const ExitOutcome &outcome, std::vector<double> confidences) {
  TokenRecord r;
  r.position = position;
  r.token = outcome.token;
  r.exit = outcome.exit;
  r.exit_layer = config.exit_layer(outcome.exit);
  r.exit_stage = StageOfExit(config, num_stages, outcome.exit) + 1;
  r.confidences = std::move(confidences);
  return r;
}

struct Hop {
  std::size_t pos = 0;
  std::vector<double> x;
  bool deciding = false;
  std::vector<double> confidences;
};

struct Emission {
  std::size_t pos = 0;
  int token = 0;
};

struct Deferred {
  std::size_t pos = 0;
  // x is the hidden state at this boundary and the exits attached there are done.
  std::size_t layer = 0;
  std::vector<double> x;
};

}  // namespace

std::vector<int> GenerationTrace::token_ids() const {
  std::vector<int> out;
  for (const auto &r : tokens) {
    out.push_back(r.token);
  }
  return out;
}

std::size_t GenerationTrace::early_exits() const {
  return static_cast<std::size_t>(
      std::count_if(tokens.begin(), tokens.end(), [&](const TokenRecord &r) { return r.exit_layer < num_layers; }));
}

double GenerationTrace::mean_exit_layer() const {
  if (tokens.empty()) {
    return 0.0;
  }
  double sum = 0.0;
  for (const auto &r : tokens) {
    sum += static_cast<double>(r.exit_layer);
  }
  return sum / static_cast<double>(tokens.size());
}

GenerationTrace GeneratePipeline(const EarlyExitModel &model, std::span<const int> prompt,
                                 const GenerateOptions &options) {
  const ModelConfig &c = model.config;
  const std::size_t N = CheckRequest(c, prompt, options);
  const StagePartition partition = Partition(c, options.num_stages);
  const std::size_t P = partition.num_stages();
  const std::vector<double> times = StageTimes(c, options);
  const std::size_t first_decision = prompt.size() - 1;
  const auto start = Clock::now();

  IncrementalModel im(model);
  std::vector<std::unique_ptr<Channel<Hop>>> links;
  for (std::size_t s = 0; s + 1 < P; ++s) {
    links.push_back(std::make_unique<Channel<Hop>>(N + 1));
  }
  Channel<Emission> feedback(N + 1);
  std::vector<TokenRecord> records(options.max_new_tokens);

  auto worker = [&](std::size_t s) {
    const StageLayout &stage = partition.stages[s];
    const bool last = s + 1 == P;
    for (std::size_t pos = 0; pos < N; ++pos) {
      Hop hop;
      if (s == 0) {
        int token = 0;
        if (pos < prompt.size()) {
          token = prompt[pos];
        } else {
          const std::optional<Emission> e = feedback.Pop(options.message_timeout);
          EXITPIPE_CHECK(e && e->pos + 1 == pos, ErrorKind::kProtocolViolation,
                         "first stage expected the token for position " + std::to_string(pos));
          token = e->token;
        }
        hop = Hop{pos, im.Embed(token, pos), pos >= first_decision, {}};
      } else {
        std::optional<Hop> in = links[s - 1]->Pop(options.message_timeout);
        EXITPIPE_CHECK(in && in->pos == pos, ErrorKind::kProtocolViolation,
                       "stage " + std::to_string(s) + " expected position " + std::to_string(pos));
        hop = std::move(*in);
      }
      auto visit = [&](std::size_t layer) {
        const std::optional<double> threshold =
            hop.deciding ? std::optional<double>(options.threshold) : std::nullopt;
        const std::optional<ExitOutcome> fired = im.VisitExitPoint(layer, pos, hop.x, threshold, &hop.confidences);
        if (fired) {
          records[pos - first_decision] = MakeRecord(c, P, pos + 1, *fired, std::move(hop.confidences));
          hop.deciding = false;
          feedback.Push({pos, fired->token});
        }
      };
      for (std::size_t l = stage.layer_begin; l < stage.layer_end; ++l) {
        visit(l);
        im.RunLayer(l, pos, hop.x);
      }
      if (last) {
        visit(c.num_layers);
      } else {
        links[s]->Push(std::move(hop));
      }
    }
  };
  WorkerPool pool(P);
  pool.Run(worker, [&] {
    for (auto &link : links) {
      link->Close();
    }
    feedback.Close();
  });

  GenerationTrace trace;
  trace.prompt_length = prompt.size();
  trace.num_layers = c.num_layers;
  std::vector<std::size_t> exit_stages;
  for (const auto &r : records) {
    exit_stages.push_back(r.exit_stage);
  }
  const InferenceLatency latency = ModelInferenceLatency(exit_stages, times);
  for (std::size_t t = 0; t < records.size(); ++t) {
    records[t].latency = latency.pipeline[t];
  }
  trace.tokens = std::move(records);
  trace.total_latency = latency.pipeline_total;
  trace.baseline_latency = ModelInferenceLatency(std::vector<std::size_t>(exit_stages.size(), P), times).pipeline_total;
  trace.cached_positions = N;
  trace.kv_complete = im.KVComplete(N);
  trace.wall_seconds = Seconds(start);
  return trace;
}

GenerationTrace GenerateRecompute(const EarlyExitModel &model, std::span<const int> prompt,
                                  const GenerateOptions &options) {
  const ModelConfig &c = model.config;
  const std::size_t N = CheckRequest(c, prompt, options);
  const std::size_t P = Partition(c, options.num_stages).num_stages();
  const std::vector<double> times = StageTimes(c, options);
  const std::size_t L = c.num_layers;
  const std::size_t first_decision = prompt.size() - 1;
  const auto start = Clock::now();

  IncrementalModel im(model);
  GenerationTrace trace;
  trace.prompt_length = prompt.size();
  trace.num_layers = L;
  std::vector<Deferred> deferred;

  // Moves every deferred token sitting at boundary `layer` through that layer, oldest first.
  auto advance = [&](std::size_t layer) {
    for (Deferred &d : deferred) {
      if (d.layer == layer) {
        im.RunLayer(layer, d.pos, d.x);
        d.layer = layer + 1;
        im.VisitExitPoint(d.layer, d.pos, d.x, std::nullopt, nullptr);
      }
    }
  };

  for (std::size_t pos = 0; pos < N; ++pos) {
    const int token = pos < prompt.size() ? prompt[pos] : trace.tokens.back().token;
    const bool deciding = pos >= first_decision;
    std::vector<double> x = im.Embed(token, pos);
    std::vector<double> confidences;
    std::optional<ExitOutcome> fired;
    bool forced = false;
    std::size_t stop = L;
    trace.max_pass_batch = std::max(trace.max_pass_batch, 1 + deferred.size());
    for (std::size_t l = 0; l <= L; ++l) {
      const std::optional<double> threshold =
          deciding && !fired ? std::optional<double>(options.threshold) : std::nullopt;
      if (auto o = im.VisitExitPoint(l, pos, x, threshold, &confidences)) {
        fired = o;
        if (l < L) {
          if (deferred.size() + 1 >= options.max_deferred) {
            forced = true;
          } else {
            stop = l;
            break;
          }
        }
      }
      if (l == L) {
        break;
      }
      advance(l);
      im.RunLayer(l, pos, x);
    }
    std::erase_if(deferred, [&](const Deferred &d) { return d.layer == L; });
    if (stop < L) {
      deferred.push_back({pos, stop, std::move(x)});
    }
    EXITPIPE_CHECK(deferred.size() < options.max_deferred, ErrorKind::kInternal,
                   "deferred list reached " + std::to_string(deferred.size()) + " tokens");
    ++trace.passes;
    trace.forced_full_passes += forced ? 1 : 0;
    if (deciding) {
      TokenRecord r = MakeRecord(c, P, pos + 1, *fired, std::move(confidences));
      const std::size_t depth = stop < L ? r.exit_stage : P;
      for (std::size_t s = 0; s < depth; ++s) {
        r.latency += times[s];
      }
      trace.total_latency += r.latency;
      trace.tokens.push_back(std::move(r));
      trace.kv_complete_after_token.push_back(im.KVComplete(pos + 1));
    }
  }
  if (!deferred.empty()) {
    for (std::size_t l = 0; l < L; ++l) {
      advance(l);
    }
    deferred.clear();
    ++trace.passes;
  }

  double full = 0.0;
  for (double t : times) {
    full += t;
  }
  for (std::size_t t = 0; t < trace.tokens.size(); ++t) {
    trace.baseline_latency += full;
  }
  trace.cached_positions = N;
  trace.kv_complete = im.KVComplete(N);
  trace.wall_seconds = Seconds(start);
  return trace;
}

std::vector<int> GenerateMonolithic(const EarlyExitModel &model, std::span<const int> prompt,
                                    std::size_t max_new_tokens) {
  EXITPIPE_CHECK(!prompt.empty(), ErrorKind::kInvalidArgument, "prompt is empty");
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  const std::size_t V = model.config.vocab_size;
  for (std::size_t t = 0; t < max_new_tokens; ++t) {
    const Tensor logits = ForwardAllExits(model, seq, 1, seq.size()).back();
    const auto last = logits.data().subspan((seq.size() - 1) * V, V);
    const int next = DecideExit(last, 1.0).token;
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

std::vector<ModeComparison> CompareModes(const EarlyExitModel &model, const std::vector<std::vector<int>> &prompts,
                                         const std::vector<double> &thresholds, const GenerateOptions &options) {
  std::vector<ModeComparison> out;
  for (double threshold : thresholds) {
    GenerateOptions o = options;
    o.threshold = threshold;
    ModeComparison m;
    m.threshold = threshold;
    double depth_sum = 0.0, recompute_baseline = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const GenerationTrace a = GeneratePipeline(model, prompts[i], o);
      const GenerationTrace b = GenerateRecompute(model, prompts[i], o);
      const std::vector<int> ta = a.token_ids(), tb = b.token_ids();
      const auto diff = std::mismatch(ta.begin(), ta.end(), tb.begin(), tb.end());
      if (diff.first != ta.end() || diff.second != tb.end()) {
        ++m.divergences;
        const auto at = static_cast<std::size_t>(diff.first - ta.begin());
        m.divergence_details.push_back("prompt " + std::to_string(i) + ": first difference at position " +
                                       std::to_string(prompts[i].size() + at));
      }
      for (std::size_t t = 0; t < std::min(a.tokens.size(), b.tokens.size()); ++t) {
        m.confidences_equal = m.confidences_equal && a.tokens[t].confidences == b.tokens[t].confidences;
      }
      ++m.prompts;
      m.tokens += a.tokens.size();
      m.early_exits += a.early_exits();
      depth_sum += a.mean_exit_layer() * static_cast<double>(a.tokens.size());
      m.pipeline_latency += a.total_latency;
      m.recompute_latency += b.total_latency;
      m.baseline_latency += a.baseline_latency;
      recompute_baseline += b.baseline_latency;
    }
    m.mean_exit_layer = m.tokens > 0 ? depth_sum / static_cast<double>(m.tokens) : 0.0;
    m.pipeline_speedup = m.pipeline_latency > 0.0 ? m.baseline_latency / m.pipeline_latency : 1.0;
    m.recompute_speedup = m.recompute_latency > 0.0 ? recompute_baseline / m.recompute_latency : 1.0;
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace exitpipe
