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
#include "dpge/dp_optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dpge/error.hpp"
#include "dpge/kernels.hpp"

namespace dpge::dp {
namespace {

// Shade applied to the clip scale so the float32-rounded row cannot land
// above the bound.
constexpr double kClipGuard = 1e-7;

void require(bool ok, const char* message) {
  if (!ok) throw ValidationError(message);
}

}  // namespace

void DpSgdConfig::validate() const {
  require(clip_norm > 0.0, "dp config: clip_norm must be positive");
  require(noise_multiplier >= 0.0, "dp config: noise_multiplier must be non-negative");
  require(logical_batch_size > 0, "dp config: logical_batch_size must be positive");
  require(shard_size > 0, "dp config: shard_size must be positive");
  require(shard_size <= logical_batch_size,
          "dp config: shard_size must not exceed logical_batch_size");
  require(peak_lr > 0.0, "dp config: peak_lr must be positive");
  require(total_steps > 0, "dp config: total_steps must be positive");
  require(weight_decay >= 0.0, "dp config: weight_decay must be non-negative");
  require(adam_beta1 > 0.0 && adam_beta1 < 1.0, "dp config: adam_beta1 must lie in (0, 1)");
  require(adam_beta2 > 0.0 && adam_beta2 < 1.0, "dp config: adam_beta2 must lie in (0, 1)");
  require(adam_eps > 0.0, "dp config: adam_eps must be positive");
}

std::vector<double> row_l2_norms(const model::PerSampleGradMatrix& grads) {
  std::vector<double> norms(static_cast<std::size_t>(grads.batch_size));
  for (int b = 0; b < grads.batch_size; ++b) {
    norms[static_cast<std::size_t>(b)] = std::sqrt(kern::sum_sq(grads.row(b), grads.param_count));
  }
  return norms;
}

void clip_rows(model::PerSampleGradMatrix& grads, double clip_norm) {
  require(clip_norm > 0.0, "clip_rows: clip_norm must be positive");
  if (std::isinf(clip_norm)) return;  // no-clip sentinel
  for (int b = 0; b < grads.batch_size; ++b) {
    const double norm = std::sqrt(kern::sum_sq(grads.row(b), grads.param_count));
    if (norm > clip_norm) {
      const double s = clip_norm * (1.0 - kClipGuard) / norm;
      kern::scale(grads.row(b), static_cast<float>(s), grads.param_count);
    }
  }
}

GradAccumulator::GradAccumulator(std::size_t param_count, int expected_examples)
    : param_count_(param_count), expected_(expected_examples) {
  if (expected_ < 0) throw ValidationError("accumulator: expected_examples must be >= 0");
}

void GradAccumulator::push_row(const float* row) {
  std::vector<double> node;
  if (!spare_.empty()) {
    node = std::move(spare_.back());
    spare_.pop_back();
  }
  node.assign(param_count_, 0.0);
  kern::accum_f64(node.data(), row, param_count_);
  int level = 0;
  // binary-counter merge: combining equal-level subtrees reproduces the
  // perfect pairwise tree over arrival indices for any shard boundaries
  while (!stack_.empty() && stack_.back().first == level) {
    kern::add(node.data(), stack_.back().second.data(), node.data(), param_count_);
    spare_.push_back(std::move(stack_.back().second));
    stack_.pop_back();
    ++level;
  }
  stack_.emplace_back(level, std::move(node));
}

void GradAccumulator::add_shard(const model::PerSampleGradMatrix& clipped) {
  if (clipped.param_count != param_count_) {
    throw ValidationError("accumulator: shard has the wrong parameter count");
  }
  if (seen_ + clipped.batch_size > expected_) {
    std::ostringstream msg;
    msg << "accumulator: shard of " << clipped.batch_size << " rows overflows the logical batch ("
        << seen_ << " seen, " << expected_ << " expected)";
    throw ProtocolError(msg.str());
  }
  if (finished_) throw ProtocolError("accumulator: add_shard after the sum was taken");
  for (int b = 0; b < clipped.batch_size; ++b) push_row(clipped.row(b));
  seen_ += clipped.batch_size;
}

const std::vector<double>& GradAccumulator::clipped_sum() {
  if (!complete()) {
    std::ostringstream msg;
    msg << "accumulator: logical batch incomplete (" << seen_ << " of " << expected_ << " rows)";
    throw ProtocolError(msg.str());
  }
  if (finished_) return result_;
  if (stack_.empty()) {
    result_.assign(param_count_, 0.0);
  } else {
    // fold remaining partial sums top-down (highest arrival index first)
    while (stack_.size() > 1) {
      auto& below = stack_[stack_.size() - 2].second;
      kern::add(below.data(), below.data(), stack_.back().second.data(), param_count_);
      stack_.pop_back();
    }
    result_ = std::move(stack_.front().second);
    stack_.clear();
  }
  finished_ = true;
  spare_.clear();
  return result_;
}

NoisyMeanResult noisy_mean(GradAccumulator& acc, double sigma, double clip_norm,
                           int logical_batch_size, rng::GaussianNoiseSource& noise,
                           std::uint64_t draw_index) {
  require(sigma >= 0.0, "noisy_mean: sigma must be non-negative");
  require(logical_batch_size > 0, "noisy_mean: logical batch size must be positive");
  const auto& sum = acc.clipped_sum();

  NoisyMeanResult out;
  out.signal_norm = std::sqrt(kern::sum_sq(sum.data(), sum.size()));
  out.mean.assign(sum.begin(), sum.end());
  if (sigma > 0.0) {
    std::vector<double> xi(sum.size());
    noise.draw(draw_index, sigma * clip_norm, xi);
    out.noise_norm = std::sqrt(kern::sum_sq(xi.data(), xi.size()));
    kern::add(out.mean.data(), out.mean.data(), xi.data(), xi.size());
  }
  const double inv_b = 1.0 / static_cast<double>(logical_batch_size);
  for (double& v : out.mean) v *= inv_b;
  return out;
}

std::uint64_t warmup_steps(std::uint64_t total_steps) {
  const std::uint64_t five_pct = (total_steps + 19) / 20;  // ceil(0.05 * total)
  return std::min(std::max<std::uint64_t>(25, five_pct), total_steps);
}

double lr_at(std::uint64_t step, std::uint64_t total_steps, double peak_lr) {
  if (step > total_steps) throw ValidationError("lr_at: step exceeds total_steps");
  if (total_steps == 0) return 0.0;
  const std::uint64_t warmup = warmup_steps(total_steps);
  if (step <= warmup) {
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  return peak_lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup);
}

OptimizerState OptimizerState::create(std::size_t param_count) {
  OptimizerState opt;
  opt.m1.assign(param_count, 0.0f);
  opt.m2.assign(param_count, 0.0f);
  return opt;
}

void adamw_step(OptimizerState& opt, std::span<float> params, std::span<const float> grad,
                double lr, double weight_decay, double beta1, double beta2, double eps) {
  require(params.size() == grad.size() && params.size() == opt.m1.size() &&
              params.size() == opt.m2.size(),
          "adamw_step: vector lengths disagree");
  // A non-finite gradient would corrupt the moments invisibly; fail fast.
  if (!std::isfinite(kern::sum_sq(grad.data(), grad.size()))) {
    throw NumericError("adamw_step: non-finite gradient");
  }
  const std::uint64_t t = opt.step_count + 1;
  const double bias1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bias2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  kern::adamw_update(params.data(), opt.m1.data(), opt.m2.data(), grad.data(), params.size(),
                     static_cast<float>(lr), static_cast<float>(beta1),
                     static_cast<float>(beta2), static_cast<float>(eps),
                     static_cast<float>(1.0 / bias1), static_cast<float>(1.0 / bias2),
                     static_cast<float>(weight_decay));
  opt.step_count = t;
}

StepReport dp_train_step(const model::ModelConfig& model_config, const DpSgdConfig& config,
                         std::span<float> params, OptimizerState& opt,
                         std::span<const data::EncodedExample> dataset, model::Mode mode,
                         double sampling_rate, std::uint64_t step_index, std::uint64_t data_seed,
                         rng::GaussianNoiseSource& noise,
                         std::optional<std::uint64_t> dropout_seed, TrainScratch& scratch) {
  config.validate();
  require(sampling_rate >= 0.0 && sampling_rate <= 1.0,
          "dp_train_step: sampling_rate must lie in [0, 1]");
  require(!std::isinf(config.clip_norm) || config.noise_multiplier == 0.0,
          "dp_train_step: the no-clip sentinel requires sigma = 0");

  StepReport report;
  report.step = step_index;

  // Poisson sample: every example enters independently with probability q.
  scratch.sampled.clear();
  rng::Stream sampler(data_seed, 0x50150000ull + step_index);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (sampler.uniform() < sampling_rate) scratch.sampled.push_back(i);
  }
  report.realized_batch_size = scratch.sampled.size();

  GradAccumulator acc(params.size(), static_cast<int>(scratch.sampled.size()));
  double loss_total = 0.0;
  for (std::size_t begin = 0; begin < scratch.sampled.size();
       begin += static_cast<std::size_t>(config.shard_size)) {
    const std::size_t end = std::min(scratch.sampled.size(),
                                     begin + static_cast<std::size_t>(config.shard_size));
    const auto batch = data::gather_batch(
        dataset, std::span(scratch.sampled).subspan(begin, end - begin), mode);
    const auto out = model::per_sample_gradients(model_config, std::span<const float>(params),
                                                 batch, mode, dropout_seed, scratch.ws,
                                                 scratch.grads);
    for (const float l : out.losses) loss_total += static_cast<double>(l);
    const auto norms = row_l2_norms(scratch.grads);
    for (std::size_t b = 0; b < norms.size(); ++b) {
      if (!std::isfinite(norms[b])) {
        std::ostringstream msg;
        msg << "dp_train_step: non-finite per-example gradient at step " << step_index
            << ", example " << scratch.sampled[begin + b] << " (row norm " << norms[b] << ")";
        throw NumericError(msg.str());
      }
    }
    clip_rows(scratch.grads, config.clip_norm);
    acc.add_shard(scratch.grads);
  }

  const auto noisy = noisy_mean(acc, config.noise_multiplier,
                                std::isinf(config.clip_norm) ? 0.0 : config.clip_norm,
                                config.logical_batch_size, noise, step_index);
  report.signal_norm = noisy.signal_norm;
  report.noise_norm = noisy.noise_norm;
  if (!scratch.sampled.empty()) {
    report.mean_loss = loss_total / static_cast<double>(scratch.sampled.size());
  }

  scratch.grad_step.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    scratch.grad_step[i] = static_cast<float>(noisy.mean[i]);
  }
  report.lr = lr_at(opt.step_count + 1, config.total_steps, config.peak_lr);
  adamw_step(opt, params, scratch.grad_step, report.lr, config.weight_decay, config.adam_beta1,
             config.adam_beta2, config.adam_eps);
  return report;
}

}  // namespace dpge::dp
