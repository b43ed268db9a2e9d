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
#ifndef DPGE_RUNNER_HPP_
#define DPGE_RUNNER_HPP_

#include <cstdint>
#include <ostream>
#include <string>

#include "dpge/config.hpp"

// Subcommand implementations behind the CLI. Each run writes a
// run_manifest.json into the output directory with the fully-resolved
// config, seeds, code version and the final accounted epsilon.

namespace dpge::cli {

inline constexpr const char* kVersion = "0.1.0";

struct PlanResult {
  double sigma = 0.0;
  double epsilon = 0.0;
  int best_order = 0;
  double per_step_rdp = 0.0;
  std::uint64_t warmup = 0;
};

// Calibrates sigma for the target epsilon and prints the planning table.
// When csv_path is non-empty the sigma sweep is also written there as CSV.
PlanResult run_plan(const RunConfig& config, std::ostream& out, const std::string& csv_path = "");

// Accounts a fixed (q, sigma, steps, delta) and prints epsilon.
struct AccountResult {
  double epsilon = 0.0;
  int best_order = 0;
  double per_step_rdp = 0.0;
};
AccountResult run_account(const RunConfig& config, std::ostream& out);

struct PretrainSummary {
  std::uint64_t steps_run = 0;
  bool budget_stopped = false;
  double final_epsilon = 0.0;
  int best_order = 0;
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
  double initial_eval_mlm_loss = 0.0;
  double final_eval_mlm_loss = 0.0;
  double sigma = 0.0;
  double sampling_rate = 0.0;
  double delta = 0.0;
  std::string final_checkpoint;
  std::string metrics_path;
  std::string snr_path;
};
PretrainSummary run_pretrain(const RunConfig& config, std::ostream& out);

struct FinetuneSummary {
  double test_macro_f1 = 0.0;
  double best_val_loss = 0.0;
  int epochs_run = 0;
  std::string metrics_path;
};
FinetuneSummary run_finetune(const RunConfig& config, std::ostream& out);

struct BenchSummary {
  std::string csv_path;
  int cells = 0;
  int failed_cells = 0;
};
BenchSummary run_bench_sweep(const RunConfig& config, std::ostream& out);

}  // namespace dpge::cli

#endif  // DPGE_RUNNER_HPP_
