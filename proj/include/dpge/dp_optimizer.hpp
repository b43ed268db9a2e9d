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
#ifndef DPGE_DP_OPTIMIZER_HPP_
#define DPGE_DP_OPTIMIZER_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dpge/data_pipeline.hpp"
#include "dpge/model.hpp"
#include "dpge/rng.hpp"

// The DP-SGD step: per-row L2 clipping, shard accumulation with a
// deterministic pairwise reduction, a single Gaussian draw per logical
// batch, and a bias-corrected AdamW update under a linear warmup/decay
// schedule.

namespace dpge::dp {

struct DpSgdConfig {
  double clip_norm = 1.0;       // C; +inf disables clipping (test-only sentinel)
  double noise_multiplier = 0.0;  // sigma
  int logical_batch_size = 256;   // B (expected batch; also the mean divisor)
  int shard_size = 32;
  double peak_lr = 1e-3;
  std::uint64_t total_steps = 1;
  double weight_decay = 0.5;    // omega, decoupled
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

// L2 norm of every row, accumulated in double.
std::vector<double> row_l2_norms(const model::PerSampleGradMatrix& grads);

// Scales each row g by min(1, C/|g|) in place. Rows already within the bound
// are untouched bit-for-bit; clipped rows are shaded by one part in 1e7 so
// the float32-rounded result never exceeds C.
void clip_rows(model::PerSampleGradMatrix& grads, double clip_norm);

// Accumulates clipped rows across shards. Rows are folded with a pairwise
// binary-counter reduction keyed by arrival index, so any shard
// decomposition of the same row stream yields a bit-identical sum.
class GradAccumulator {
 public:
  GradAccumulator(std::size_t param_count, int expected_examples);

  void add_shard(const model::PerSampleGradMatrix& clipped);
  int examples_seen() const { return seen_; }
  int expected_examples() const { return expected_; }
  bool complete() const { return seen_ == expected_; }

  // Final clipped sum; ProtocolError while incomplete.
  const std::vector<double>& clipped_sum();

 private:
  void push_row(const float* row);

  std::size_t param_count_;
  int expected_;
  int seen_ = 0;
  std::vector<std::pair<int, std::vector<double>>> stack_;  // (tree level, partial sum)
  std::vector<std::vector<double>> spare_;
  std::vector<double> result_;
  bool finished_ = false;
};

struct NoisyMeanResult {
  std::vector<double> mean;   // (clipped_sum + xi) / B
  double signal_norm = 0.0;   // ||clipped_sum||
  double noise_norm = 0.0;    // ||xi||; 0 when sigma == 0 (no draw is made)
};

// Exactly one P-dimensional Gaussian draw per call (none when sigma == 0).
// `draw_index` must be unique per logical batch, e.g. the step index.
NoisyMeanResult noisy_mean(GradAccumulator& acc, double sigma, double clip_norm,
                           int logical_batch_size, rng::GaussianNoiseSource& noise,
                           std::uint64_t draw_index);

// Warmup length: max(25, ceil(0.05 * total_steps)), clamped to total_steps.
std::uint64_t warmup_steps(std::uint64_t total_steps);

// Linear 0->peak warmup over [0, warmup], then linear peak->0 decay over
// [warmup, total]. step > total is a domain error.
double lr_at(std::uint64_t step, std::uint64_t total_steps, double peak_lr);

struct OptimizerState {
  std::vector<float> m1, m2;
  std::uint64_t step_count = 0;

  static OptimizerState create(std::size_t param_count);
};

// Bias-corrected Adam + decoupled weight decay. Fails fast on non-finite
// gradients (NumericError).
void adamw_step(OptimizerState& opt, std::span<float> params, std::span<const float> grad,
                double lr, double weight_decay, double beta1, double beta2, double eps);

struct StepReport {
  std::uint64_t step = 0;
  double mean_loss = 0.0;  // over the realized batch; 0 for an empty batch
  std::size_t realized_batch_size = 0;
  double signal_norm = 0.0;
  double noise_norm = 0.0;
  double lr = 0.0;
};

// Reusable buffers for the training loop.
struct TrainScratch {
  model::Workspace<float> ws;
  model::PerSampleGradMatrix grads;
  std::vector<float> grad_step;
  std::vector<std::size_t> sampled;
};

// One DP-SGD step: Poisson-sample the dataset at `sampling_rate`, process
// the realized batch in shards (forward, per-sample gradients, clip,
// accumulate), add one noise draw, and apply AdamW with the scheduled
// learning rate (evaluated at the 1-based step index).
StepReport dp_train_step(const model::ModelConfig& model_config, const DpSgdConfig& config,
                         std::span<float> params, OptimizerState& opt,
                         std::span<const data::EncodedExample> dataset, model::Mode mode,
                         double sampling_rate, std::uint64_t step_index, std::uint64_t data_seed,
                         rng::GaussianNoiseSource& noise,
                         std::optional<std::uint64_t> dropout_seed, TrainScratch& scratch);

}  // namespace dpge::dp

#endif  // DPGE_DP_OPTIMIZER_HPP_
