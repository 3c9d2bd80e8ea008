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


#include "exitpipe/infer/kv_cache.h"

#include <algorithm>
#include <numeric>
#include <string>

#include "exitpipe/error.h"

namespace exitpipe {

KVCache::KVCache(std::size_t num_slots, std::size_t capacity, std::size_t hidden)
    : capacity_(capacity),
      hidden_(hidden),
      data_(num_slots, std::vector<double>(capacity * 2 * hidden)),
      mask_(num_slots, std::vector<char>(capacity, 0)),
      writes_(num_slots, 0) {}

void KVCache::Write(std::size_t slot, std::size_t pos, std::span<const double> key, std::span<const double> value) {
  EXITPIPE_CHECK(slot < data_.size(), ErrorKind::kInvalidArgument, "KV slot out of range");
  EXITPIPE_CHECK(pos < capacity_, ErrorKind::kContextOverflow,
                 "position " + std::to_string(pos) + " exceeds KV capacity " + std::to_string(capacity_));
  EXITPIPE_CHECK(key.size() == hidden_ && value.size() == hidden_, ErrorKind::kShapeMismatch, "KV row width mismatch");
  double *row = data_[slot].data() + pos * row_stride();
  if (mask_[slot][pos]) {
    EXITPIPE_CHECK(std::equal(key.begin(), key.end(), row) && std::equal(value.begin(), value.end(), row + hidden_),
                   ErrorKind::kInternal,
                   "KV entry (" + std::to_string(slot) + ", " + std::to_string(pos) + ") rewritten with new values");
    return;
  }
  std::copy(key.begin(), key.end(), row);
  std::copy(value.begin(), value.end(), row + hidden_);
  mask_[slot][pos] = 1;
  ++writes_[slot];
}

bool KVCache::present(std::size_t slot, std::size_t pos) const { return pos < capacity_ && mask_.at(slot)[pos]; }

void KVCache::RequireFilled(std::size_t slot, std::size_t len) const {
  for (std::size_t p = 0; p < len; ++p) {
    EXITPIPE_CHECK(present(slot, p), ErrorKind::kInternal,
                   "read of absent KV entry (" + std::to_string(slot) + ", " + std::to_string(p) + ")");
  }
}

bool KVCache::SlotComplete(std::size_t slot, std::size_t positions) const {
  if (positions > capacity_) {
    return false;
  }
  const auto &m = mask_.at(slot);
  return std::all_of(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(positions), [](char c) { return c != 0; });
}

std::size_t KVCache::writes() const { return std::accumulate(writes_.begin(), writes_.end(), std::size_t{0}); }

}  // namespace exitpipe
