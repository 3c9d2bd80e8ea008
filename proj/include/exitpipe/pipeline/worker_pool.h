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

#ifndef EXITPIPE_PIPELINE_WORKER_POOL_H_
#define EXITPIPE_PIPELINE_WORKER_POOL_H_

#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace exitpipe {

// One long-lived thread per pipeline stage. Training iterations and pipelined inference
// both hand each worker its stage function and wait for all of them.
class WorkerPool {
 public:
  explicit WorkerPool(std::size_t num_workers);
  ~WorkerPool();
  WorkerPool(const WorkerPool &) = delete;
  WorkerPool &operator=(const WorkerPool &) = delete;

  std::size_t size() const { return threads_.size(); }

  // Runs task(i) on worker i and waits for every worker. The first exception wins: on_failure
  // runs once so blocked workers can be released, and the exception is rethrown here.
  void Run(const std::function<void(std::size_t)> &task, const std::function<void()> &on_failure = {});

 private:
  void Loop(std::size_t index);

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable start_, done_;
  const std::function<void(std::size_t)> *task_ = nullptr;
  std::function<void()> on_failure_;
  std::size_t generation_ = 0;
  std::size_t pending_ = 0;
  std::exception_ptr failure_;
  bool stop_ = false;
};

}  // namespace exitpipe

#endif  // EXITPIPE_PIPELINE_WORKER_POOL_H_
