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

#include "exitpipe/model/corpus.h"

#include <fstream>

#include "exitpipe/error.h"

namespace exitpipe {

TokenCorpus TokenCorpus::Synthetic(std::size_t vocab_size, const CorpusSpec &spec) {
  EXITPIPE_CHECK(vocab_size >= 2, ErrorKind::kInvalidConfig, "corpus needs at least two symbols");
  EXITPIPE_CHECK(spec.branching >= 1 && spec.determinism >= 0.0 && spec.determinism <= 1.0 && spec.length >= 2,
                 ErrorKind::kInvalidConfig, "invalid corpus spec");
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> any(0, static_cast<int>(vocab_size) - 1);

  // Fixed second-order successor table and first-order candidate lists.
  std::vector<int> pair_next(vocab_size * vocab_size);
  for (int &t : pair_next) {
    t = any(rng);
  }
  std::vector<int> candidates(vocab_size * spec.branching);
  for (int &t : candidates) {
    t = any(rng);
  }

  TokenCorpus c;
  c.vocab_size_ = vocab_size;
  c.tokens_.reserve(spec.length);
  c.tokens_.push_back(any(rng));
  c.tokens_.push_back(any(rng));
  std::bernoulli_distribution take_pair(spec.determinism);
  std::uniform_int_distribution<std::size_t> pick(0, spec.branching - 1);
  while (c.tokens_.size() < spec.length) {
    const auto a = static_cast<std::size_t>(c.tokens_[c.tokens_.size() - 2]);
    const auto b = static_cast<std::size_t>(c.tokens_.back());
    c.tokens_.push_back(take_pair(rng) ? pair_next[a * vocab_size + b] : candidates[b * spec.branching + pick(rng)]);
  }
  return c;
}

TokenCorpus TokenCorpus::FromFile(const std::string &path, std::size_t vocab_size) {
  std::ifstream in(path);
  EXITPIPE_CHECK(in.good(), ErrorKind::kIo, "cannot open token file '" + path + "'");
  TokenCorpus c;
  c.vocab_size_ = vocab_size;
  long long id = 0;
  while (in >> id) {
    EXITPIPE_CHECK(id >= 0 && static_cast<std::size_t>(id) < vocab_size, ErrorKind::kInvalidToken,
                   "token " + std::to_string(id) + " in '" + path + "' outside vocabulary");
    c.tokens_.push_back(static_cast<int>(id));
  }
  EXITPIPE_CHECK(in.eof(), ErrorKind::kParse, "token file '" + path + "' contains a non-integer");
  EXITPIPE_CHECK(c.tokens_.size() >= 2, ErrorKind::kParse, "token file '" + path + "' is too short");
  return c;
}

TokenBatch TokenCorpus::Sample(std::mt19937_64 &rng, std::size_t batch, std::size_t seq) const {
  EXITPIPE_CHECK(tokens_.size() > seq, ErrorKind::kInvalidArgument, "corpus shorter than one training window");
  std::uniform_int_distribution<std::size_t> start(0, tokens_.size() - seq - 1);
  TokenBatch out;
  out.batch = batch;
  out.seq = seq;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t s = start(rng);
    out.inputs.insert(out.inputs.end(), tokens_.begin() + static_cast<std::ptrdiff_t>(s),
                      tokens_.begin() + static_cast<std::ptrdiff_t>(s + seq));
    out.targets.insert(out.targets.end(), tokens_.begin() + static_cast<std::ptrdiff_t>(s + 1),
                       tokens_.begin() + static_cast<std::ptrdiff_t>(s + seq + 1));
  }
  return out;
}

}  // namespace exitpipe
