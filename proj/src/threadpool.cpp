/*
 * Copyright 2026 The DPGE Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "dpge/threadpool.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace dpge {
namespace {

std::size_t resolve_worker_count() {
  if (const char* env = std::getenv("DPGE_THREADS")) {
    const long parsed = std::strtol(env, nullptr, 10);
    if (parsed >= 1) return static_cast<std::size_t>(parsed);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Fork-join pool. Workers grab chunk indices from an atomic cursor; chunk
// boundaries are fixed up front so the output of any job is identical no
// matter which worker runs which chunk.
class Pool {
 public:
  Pool() : workers_(resolve_worker_count() - 1) {
    threads_.reserve(workers_);
    for (std::size_t i = 0; i < workers_; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      shutdown_ = true;
    }
    wake_.notify_all();
    for (auto& t : threads_) t.join();
  }

  std::size_t size() const { return workers_ + 1; }

  void run(std::size_t chunks, const std::function<void(std::size_t)>& chunk_fn) {
    if (chunks == 0) return;
    if (workers_ == 0 || chunks == 1) {
      for (std::size_t c = 0; c < chunks; ++c) chunk_fn(c);
      return;
    }
    {
      std::lock_guard<std::mutex> lock(mutex_);
      chunk_fn_ = &chunk_fn;
      total_chunks_ = chunks;
      next_chunk_.store(0, std::memory_order_relaxed);
      pending_.store(chunks, std::memory_order_relaxed);
      ++generation_;
    }
    wake_.notify_all();
    drain();
    std::unique_lock<std::mutex> lock(mutex_);
    done_.wait(lock, [this] { return pending_.load(std::memory_order_acquire) == 0; });
    chunk_fn_ = nullptr;
  }

 private:
  void drain() {
    for (;;) {
      const std::size_t c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
      if (c >= total_chunks_) break;
      (*chunk_fn_)(c);
      finish_one();
    }
  }

  void finish_one() {
    if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
      std::lock_guard<std::mutex> lock(mutex_);
      done_.notify_all();
    }
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lock(mutex_);
        wake_.wait(lock, [&] { return shutdown_ || generation_ != seen; });
        if (shutdown_) return;
        seen = generation_;
      }
      drain();
    }
  }

  std::size_t workers_;
  std::vector<std::thread> threads_;
  std::mutex mutex_;
  std::condition_variable wake_;
  std::condition_variable done_;
  const std::function<void(std::size_t)>* chunk_fn_ = nullptr;
  std::size_t total_chunks_ = 0;
  std::atomic<std::size_t> next_chunk_{0};
  std::atomic<std::size_t> pending_{0};
  std::uint64_t generation_ = 0;
  bool shutdown_ = false;
};

Pool& pool() {
  static Pool instance;
  return instance;
}

}  // namespace

std::size_t worker_threads() { return pool().size(); }

void parallel_for(std::size_t count, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& fn) {
  if (count == 0) return;
  if (grain == 0) grain = 1;
  const std::size_t workers = pool().size();
  if (workers == 1 || count <= grain) {
    fn(0, count);
    return;
  }
  // Cap chunk count at a small multiple of the worker count; chunk
  // boundaries depend only on (count, grain, workers).
  const std::size_t max_chunks = workers * 4;
  const std::size_t chunk = std::max(grain, (count + max_chunks - 1) / max_chunks);
  const std::size_t chunks = (count + chunk - 1) / chunk;
  const std::function<void(std::size_t)> chunk_fn = [&](std::size_t c) {
    const std::size_t begin = c * chunk;
    const std::size_t end = std::min(count, begin + chunk);
    fn(begin, end);
  };
  pool().run(chunks, chunk_fn);
}

}  // namespace dpge
