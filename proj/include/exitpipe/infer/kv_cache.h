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


#ifndef EXITPIPE_INFER_KV_CACHE_H_
#define EXITPIPE_INFER_KV_CACHE_H_

#include <cstddef>
#include <span>
#include <vector>

namespace exitpipe {

// Keys and values of attention layers, one slot per layer, each row [k | v] of width 2h.
// A (slot, position) entry is either present or absent; reading an absent one throws.
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t num_slots, std::size_t capacity, std::size_t hidden);

  std::size_t num_slots() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t hidden() const { return hidden_; }

  // Stores the key and value rows of one position. Writing a present entry again is allowed
  // only with bitwise-equal values; anything else throws kInternal.
  void Write(std::size_t slot, std::size_t pos, std::span<const double> key, std::span<const double> value);
  bool present(std::size_t slot, std::size_t pos) const;
  // Throws kInternal unless positions [0, len) are present in the slot.
  void RequireFilled(std::size_t slot, std::size_t len) const;
  // Base of row 0 in the slot; key of position p at base + p * row_stride(), value at + hidden().
  const double *base(std::size_t slot) const { return data_.at(slot).data(); }
  std::size_t row_stride() const { return 2 * hidden_; }

  bool SlotComplete(std::size_t slot, std::size_t positions) const;
  std::size_t writes() const;

 private:
  std::size_t capacity_ = 0;
  std::size_t hidden_ = 0;
  std::vector<std::vector<double>> data_;
  // Separate vectors per slot so stage workers owning different layers never share one.
  std::vector<std::vector<char>> mask_;
  std::vector<std::size_t> writes_;
};

}  // namespace exitpipe

#endif  // EXITPIPE_INFER_KV_CACHE_H_
