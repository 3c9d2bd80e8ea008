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

#include "exitpipe/pipeline/worker_pool.h"

#include "exitpipe/error.h"

namespace exitpipe {

WorkerPool::WorkerPool(std::size_t num_workers) {
  EXITPIPE_CHECK(num_workers > 0, ErrorKind::kInvalidArgument, "worker pool needs at least one worker");
  for (std::size_t i = 0; i < num_workers; ++i) {
    threads_.emplace_back([this, i] { Loop(i); });
  }
}

WorkerPool::~WorkerPool() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  start_.notify_all();
  for (auto &t : threads_) {
    t.join();
  }
}

void WorkerPool::Run(const std::function<void(std::size_t)> &task, const std::function<void()> &on_failure) {
  std::unique_lock lock(mu_);
  task_ = &task;
  on_failure_ = on_failure;
  failure_ = nullptr;
  pending_ = threads_.size();
  ++generation_;
  start_.notify_all();
  done_.wait(lock, [&] { return pending_ == 0; });
  task_ = nullptr;
  on_failure_ = nullptr;
  if (failure_) {
    std::rethrow_exception(failure_);
  }
}

void WorkerPool::Loop(std::size_t index) {
  std::size_t seen = 0;
  while (true) {
    const std::function<void(std::size_t)> *task = nullptr;
    {
      std::unique_lock lock(mu_);
      start_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) {
        return;
      }
      seen = generation_;
      task = task_;
    }
    std::exception_ptr error;
    try {
      (*task)(index);
    } catch (...) {
      error = std::current_exception();
    }
    std::function<void()> release;
    {
      std::lock_guard lock(mu_);
      if (error && !failure_) {
        failure_ = error;
        release = on_failure_;
      }
    }
    // Outside the lock: releasing may wake workers that then finish and report.
    if (release) {
      release();
    }
    // Drop this worker's references before reporting, so Run owns the exception alone.
    error = nullptr;
    release = nullptr;
    {
      std::lock_guard lock(mu_);
      if (--pending_ == 0) {
        done_.notify_all();
      }
    }
  }
}

}  // namespace exitpipe
