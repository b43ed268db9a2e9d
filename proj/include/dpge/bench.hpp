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
#ifndef DPGE_BENCH_HPP_
#define DPGE_BENCH_HPP_

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string_view>
#include <vector>

#include "dpge/model.hpp"

// Runtime comparison of per-sample-gradient strategies. All modes run the
// same math (same clipping, same accumulation tree, same noise draws) and
// differ only in execution strategy, so their parameter trajectories are
// directly comparable.

namespace dpge::bench {

enum class BenchMode {
  kNaiveLoop,   // one forward/backward per example through the public API
  kVectorized,  // one batched forward/backward per batch
  kSharded,     // vectorized within shards, accumulated across shards
};

std::string_view mode_name(BenchMode mode);
std::optional<BenchMode> mode_from_name(std::string_view name);

struct BenchConfig {
  BenchMode mode = BenchMode::kVectorized;
  int batch_size = 32;
  int epochs = 20;  // measured epochs (>= 5); one warmup epoch is discarded
  model::ModelConfig model;
  std::size_t dataset_size = 256;
  int shard_size = 8;  // sharded mode only
  std::uint64_t seed = 1;
  double sigma = 0.5;
  double clip_norm = 1.0;
  double lr = 1e-3;
  double weight_decay = 0.0;
};

struct BenchResult {
  BenchMode mode = BenchMode::kVectorized;
  int batch_size = 0;
  std::optional<double> median_epoch_seconds;  // absent for a failed cell
  std::optional<std::uint64_t> peak_memory_bytes;
  int epochs_measured = 0;
};

// Trains the desk-scale classifier with DP-SGD in the given mode and reports
// the median wall-clock seconds per epoch. Out-of-memory turns into a failed
// cell (epochs_measured = 0) instead of a crash. When `final_params` is
// non-null it receives the trained parameter vector for equivalence checks.
BenchResult run_bench(const BenchConfig& config, std::vector<float>* final_params = nullptr);

// Header: mode,batch_size,median_epoch_seconds,peak_memory_bytes,epochs_measured
// Rows sorted by (mode name, batch_size).
void emit_bench_csv(std::span<const BenchResult> results, std::ostream& sink);

}  // namespace dpge::bench

#endif  // DPGE_BENCH_HPP_
