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
#ifndef DPGE_THREADPOOL_HPP_
#define DPGE_THREADPOOL_HPP_

#include <cstddef>
#include <functional>

namespace dpge {

// Number of worker threads the process-wide pool runs with. Resolved once
// from DPGE_THREADS (falling back to hardware_concurrency).
std::size_t worker_threads();

// Partitions [0, count) into contiguous chunks and runs `fn(begin, end)` on
// the pool. Work assignment depends only on (count, worker count), and each
// index is processed by exactly one invocation, so results are independent
// of scheduling. Runs inline when the pool has a single worker or the range
// is small.
void parallel_for(std::size_t count, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace dpge

#endif  // DPGE_THREADPOOL_HPP_
