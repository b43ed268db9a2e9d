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
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dpge/config.hpp"
#include "dpge/error.hpp"
#include "dpge/runner.hpp"

namespace {

// Exit codes: 0 ok, 2 config error, 3 numeric abort, 4 budget exhausted,
// 5 IO error.
constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitBudget = 4;
constexpr int kExitIo = 5;

struct CommonArgs {
  std::string config_path;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  // accountant overrides for plan/account
  std::optional<double> target_eps, sigma, q, delta;
  std::optional<std::uint64_t> steps;
  std::string csv_path;
  std::string init_checkpoint;
  std::string checkpoint;
};

dpge::cli::RunConfig build_config(const CommonArgs& args, dpge::cli::RunMode mode) {
  dpge::cli::RunConfig cfg;
  if (!args.config_path.empty()) {
    cfg = dpge::cli::parse_config(args.config_path);
    if (cfg.mode != mode) {
      throw dpge::ConfigError("config file mode '" + std::string(mode_name(cfg.mode)) +
                              "' does not match the '" + std::string(mode_name(mode)) +
                              "' subcommand");
    }
  } else {
    cfg.mode = mode;
  }
  if (!args.output_dir.empty()) cfg.output_dir = args.output_dir;
  if (args.seed) {
    cfg.seeds = dpge::cli::Seeds{*args.seed, *args.seed + 1, *args.seed + 2, *args.seed + 3};
  }
  if (args.target_eps) cfg.target_epsilon = *args.target_eps;
  if (args.sigma) cfg.noise_multiplier = *args.sigma;
  if (args.q) cfg.sampling_rate = *args.q;
  if (args.delta) cfg.delta = *args.delta;
  if (args.steps) cfg.steps = *args.steps;
  if (!args.init_checkpoint.empty()) cfg.init_checkpoint = args.init_checkpoint;
  if (!args.checkpoint.empty()) cfg.init_checkpoint = args.checkpoint;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dpge: differentially-private training engine"};
  app.require_subcommand(1);

  CommonArgs args;
  app.add_option("--config", args.config_path, "JSON run configuration")->envname("DPGE_CONFIG");
  app.add_option("--output-dir", args.output_dir, "output directory override");
  app.add_option("--seed", args.seed, "master seed (derives init/data/noise/dropout)");

  auto* plan = app.add_subcommand("plan", "calibrate sigma for a target epsilon");
  plan->add_option("--target-eps", args.target_eps, "target epsilon");
  plan->add_option("--q", args.q, "sampling rate");
  plan->add_option("--delta", args.delta, "delta");
  plan->add_option("--steps", args.steps, "step count");
  plan->add_option("--csv", args.csv_path, "write the sigma sweep as CSV");

  auto* account = app.add_subcommand("account", "account epsilon for a fixed sigma");
  account->add_option("--sigma", args.sigma, "noise multiplier");
  account->add_option("--q", args.q, "sampling rate");
  account->add_option("--delta", args.delta, "delta");
  account->add_option("--steps", args.steps, "step count");

  auto* pretrain = app.add_subcommand("pretrain", "DP MLM/NSP pretraining");
  pretrain->add_option("--init-checkpoint", args.init_checkpoint,
                       "continue from a prior checkpoint");

  auto* finetune = app.add_subcommand("finetune", "non-private classifier fine-tuning");
  finetune->add_option("--checkpoint", args.checkpoint, "checkpoint to fine-tune from");

  app.add_subcommand("bench", "per-sample-gradient strategy benchmark");

  CLI11_PARSE(app, argc, argv);

  try {
    const std::string sub = app.get_subcommands().front()->get_name();
    if (sub == "plan") {
      dpge::cli::run_plan(build_config(args, dpge::cli::RunMode::kPlan), std::cout,
                          args.csv_path);
    } else if (sub == "account") {
      dpge::cli::run_account(build_config(args, dpge::cli::RunMode::kAccount), std::cout);
    } else if (sub == "pretrain") {
      const auto summary =
          dpge::cli::run_pretrain(build_config(args, dpge::cli::RunMode::kPretrain), std::cout);
      if (summary.budget_stopped) return kExitBudget;
    } else if (sub == "finetune") {
      dpge::cli::run_finetune(build_config(args, dpge::cli::RunMode::kFinetune), std::cout);
    } else if (sub == "bench") {
      dpge::cli::run_bench_sweep(build_config(args, dpge::cli::RunMode::kBench), std::cout);
    }
  } catch (const dpge::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const dpge::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const dpge::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const dpge::BudgetExhausted& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBudget;
  } catch (const dpge::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
