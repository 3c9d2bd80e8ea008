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

#ifndef EXITPIPE_MODEL_CORPUS_H_
#define EXITPIPE_MODEL_CORPUS_H_

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "exitpipe/model/model.h"

namespace exitpipe {

// Seeded Markov-chain token generator. With probability `determinism` the next token is a
// fixed function of the previous two tokens; otherwise it is drawn from `branching`
// candidates attached to the previous token. The first rule needs two tokens of context,
// the second only one, so deeper layers have something to gain over shallow exits.
struct CorpusSpec {
  std::uint64_t seed = 1;
  std::size_t branching = 4;
  double determinism = 0.6;
  std::size_t length = 200000;
};

class TokenCorpus {
 public:
  // Generates a synthetic stream over vocab_size symbols.
  static TokenCorpus Synthetic(std::size_t vocab_size, const CorpusSpec &spec);
  // Reads whitespace-separated token ids. Throws kInvalidToken for ids outside [0, vocab_size).
  static TokenCorpus FromFile(const std::string &path, std::size_t vocab_size);

  const std::vector<int> &tokens() const { return tokens_; }
  std::size_t vocab_size() const { return vocab_size_; }

  // batch windows of seq + 1 tokens at random offsets; inputs are the first seq, targets the last seq.
  TokenBatch Sample(std::mt19937_64 &rng, std::size_t batch, std::size_t seq) const;

 private:
  std::vector<int> tokens_;
  std::size_t vocab_size_ = 0;
};

}  // namespace exitpipe

#endif  // EXITPIPE_MODEL_CORPUS_H_
