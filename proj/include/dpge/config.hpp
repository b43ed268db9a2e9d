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
#ifndef DPGE_CONFIG_HPP_
#define DPGE_CONFIG_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dpge/bench.hpp"
#include "dpge/dp_optimizer.hpp"
#include "dpge/model.hpp"

// Run configuration: strict JSON (unknown keys rejected), defaults filled,
// validated before any work starts.

namespace dpge::cli {

enum class RunMode { kPlan, kAccount, kPretrain, kFinetune, kBench };

std::string_view mode_name(RunMode mode);

struct Seeds {
  std::uint64_t init = 1;
  std::uint64_t data = 2;
  std::uint64_t noise = 3;
  std::uint64_t dropout = 4;
};

struct FinetuneConfig {
  int epochs = 5;
  int batch_size = 16;
  double lr = 5e-5;
  double weight_decay = 0.0;
  std::uint64_t dataset_size = 2000;
  double test_fraction = 0.2;
  int early_stop_patience = 1;
  bool random_init = false;  // ignore the checkpoint weights, keep the config
};

struct BenchSweepConfig {
  std::vector<bench::BenchMode> modes = {bench::BenchMode::kNaiveLoop,
                                         bench::BenchMode::kVectorized,
                                         bench::BenchMode::kSharded};
  std::vector<int> batch_sizes = {8, 16, 32, 64};
  int epochs = 20;
  std::uint64_t dataset_size = 256;
  int shard_size = 8;
  double sigma = 0.5;
  double lr = 1e-3;
};

struct RunConfig {
  RunMode mode = RunMode::kPlan;
  std::string corpus_path;  // a real path, or "synthetic:tokens=<N>"
  std::string output_dir = "out";
  std::string init_checkpoint;
  model::ModelConfig model;
  dp::DpSgdConfig dp;

  // privacy knobs (top-level keys); unset values are resolved at run time
  std::optional<double> target_epsilon;
  std::optional<double> delta;
  std::optional<double> sampling_rate;
  std::optional<double> noise_multiplier;
  std::optional<std::uint64_t> steps;  // plan/account step count

  Seeds seeds;
  std::uint64_t checkpoint_every = 50;
  double validation_fraction = 0.05;
  double masking_rate = 0.15;
  std::string budget_mode = "fixed-steps";  // or "stop-at-epsilon"
  std::string snr_noise_norm = "realized";  // or "expected"
  FinetuneConfig finetune;
  BenchSweepConfig bench;

  void validate() const;
};

RunConfig parse_config(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");

// Fully-resolved config as a JSON string (the run_manifest "config" block);
// feeding it back through parse_config_text reproduces the run.
std::string resolved_config_json(const RunConfig& config);

}  // namespace dpge::cli

#endif  // DPGE_CONFIG_HPP_
