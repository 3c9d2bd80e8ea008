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

#ifndef EXITPIPE_PIPELINE_CHANNEL_H_
#define EXITPIPE_PIPELINE_CHANNEL_H_

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <deque>
#include <mutex>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "exitpipe/error.h"

namespace exitpipe {

// Bounded FIFO between two workers. Close() wakes every waiter; a closed channel rejects
// pushes and drains what it already holds.
template <typename T>
class Channel {
 public:
  explicit Channel(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

  void Push(T value) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    EXITPIPE_CHECK(!closed_, ErrorKind::kInternal, "push on a closed channel");
    items_.push_back(std::move(value));
    not_empty_.notify_one();
  }

  // Blocks until an item arrives; nullopt once the channel is closed and empty.
  std::optional<T> Pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) {
      return std::nullopt;
    }
    T value = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return value;
  }

  // As Pop, but throws kProtocolViolation if nothing arrives within timeout.
  std::optional<T> Pop(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    const bool ready = not_empty_.wait_for(lock, timeout, [&] { return closed_ || !items_.empty(); });
    EXITPIPE_CHECK(ready, ErrorKind::kProtocolViolation, "timed out waiting for a message");
    if (items_.empty()) {
      return std::nullopt;
    }
    T value = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return value;
  }

  void Close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return items_.size();
  }

 private:
  const std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_empty_, not_full_;
  std::deque<T> items_;
  bool closed_ = false;
};

// Receiving end of a channel whose sender emits microbatches in a known order. The
// receiver may consume them in a different order; early arrivals wait in a stash. Any
// arrival that departs from the sender's order is a protocol violation.
template <typename T>
class Inbox {
 public:
  Inbox(Channel<T> &channel, std::vector<std::size_t> send_order, std::chrono::milliseconds timeout,
        std::string name)
      : channel_(channel), order_(std::move(send_order)), timeout_(timeout), name_(std::move(name)) {}

  T Take(std::size_t microbatch) {
    if (auto it = stash_.find(microbatch); it != stash_.end()) {
      T value = std::move(it->second);
      stash_.erase(it);
      return value;
    }
    while (true) {
      std::optional<T> msg = channel_.Pop(timeout_);
      EXITPIPE_CHECK(msg.has_value(), ErrorKind::kProtocolViolation,
                     name_ + ": queue closed while waiting for microbatch " + std::to_string(microbatch));
      EXITPIPE_CHECK(next_ < order_.size() && msg->microbatch == order_[next_], ErrorKind::kProtocolViolation,
                     name_ + ": out-of-order microbatch " + std::to_string(msg->microbatch) +
                         (next_ < order_.size() ? ", expected " + std::to_string(order_[next_]) : ""));
      ++next_;
      if (msg->microbatch == microbatch) {
        return std::move(*msg);
      }
      stash_.emplace(msg->microbatch, std::move(*msg));
    }
  }

  std::size_t received() const { return next_; }

 private:
  Channel<T> &channel_;
  std::vector<std::size_t> order_;
  std::chrono::milliseconds timeout_;
  std::string name_;
  std::size_t next_ = 0;
  std::map<std::size_t, T> stash_;
};

}  // namespace exitpipe

#endif  // EXITPIPE_PIPELINE_CHANNEL_H_
