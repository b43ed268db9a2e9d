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
#include "dpge/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <new>
#include <string>

#include "dpge/data_pipeline.hpp"
#include "dpge/dp_optimizer.hpp"
#include "dpge/error.hpp"
#include "dpge/rng.hpp"

namespace dpge::bench {
namespace {

std::optional<std::uint64_t> vm_hwm_bytes() {
#ifdef __linux__
  std::ifstream status("/proc/self/status");
  std::string line;
  while (std::getline(status, line)) {
    if (line.rfind("VmHWM:", 0) == 0) {
      const std::uint64_t kb = std::strtoull(line.c_str() + 6, nullptr, 10);
      return kb * 1024;
    }
  }
#endif
  return std::nullopt;
}

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

std::string_view mode_name(BenchMode mode) {
  switch (mode) {
    case BenchMode::kNaiveLoop:
      return "naive_loop";
    case BenchMode::kVectorized:
      return "vectorized";
    case BenchMode::kSharded:
      return "sharded";
  }
  return "unknown";
}

std::optional<BenchMode> mode_from_name(std::string_view name) {
  if (name == "naive_loop") return BenchMode::kNaiveLoop;
  if (name == "vectorized") return BenchMode::kVectorized;
  if (name == "sharded") return BenchMode::kSharded;
  return std::nullopt;
}

BenchResult run_bench(const BenchConfig& config, std::vector<float>* final_params) {
  if (config.epochs < 5) throw ValidationError("bench: epochs must be >= 5 (median stability)");
  if (config.batch_size < 1 ||
      static_cast<std::size_t>(config.batch_size) > config.dataset_size) {
    throw ValidationError("bench: batch_size must lie in [1, dataset_size]");
  }
  if (config.shard_size < 1) throw ValidationError("bench: shard_size must be positive");
  config.model.validate();

  BenchResult result;
  result.mode = config.mode;
  result.batch_size = config.batch_size;

  const auto hwm_before = vm_hwm_bytes();
  try {
    const auto dataset = data::make_synthetic_classification(
        config.model.vocab_size, config.dataset_size,
        data::ClassificationOptions{config.model.max_seq_len, 8}, config.seed);
    auto params = model::init_params(config.model, config.seed);
    auto opt = dp::OptimizerState::create(params.values.size());
    rng::GaussianNoiseSource noise(rng::derive_key(config.seed, 0xBE7C));

    // Reusable scratch for the vectorized/sharded production path. The naive
    // loop deliberately goes through the one-example public API, paying its
    // per-call setup each time, which is exactly the strategy it models.
    model::Workspace<float> ws;
    model::PerSampleGradMatrix grads;
    model::PerSampleGradMatrix batch_grads;
    std::vector<float> grad_step(params.values.size());
    std::vector<std::size_t> indices;

    const int full_batches = static_cast<int>(config.dataset_size) / config.batch_size;
    if (full_batches == 0) throw ValidationError("bench: dataset smaller than one batch");

    std::vector<double> epoch_seconds;
    std::uint64_t global_step = 0;
    std::span<const float> params_view(params.values);

    for (int epoch = 0; epoch <= config.epochs; ++epoch) {  // epoch 0 is warmup
      const auto t0 = std::chrono::steady_clock::now();
      for (int bi = 0; bi < full_batches; ++bi) {
        const std::size_t base = static_cast<std::size_t>(bi) * config.batch_size;
        dp::GradAccumulator acc(params.values.size(), config.batch_size);
        double loss_total = 0.0;
        (void)loss_total;

        switch (config.mode) {
          case BenchMode::kNaiveLoop: {
            // one by one: full forward/backward per example, fresh buffers
            for (int b = 0; b < config.batch_size; ++b) {
              indices.assign(1, base + static_cast<std::size_t>(b));
              const auto batch = data::gather_batch(dataset, indices, model::Mode::kClassify);
              model::PerSampleGradMatrix single;
              model::per_sample_gradients(config.model, params_view, batch,
                                          model::Mode::kClassify, single);
              dp::clip_rows(single, config.clip_norm);
              acc.add_shard(single);
            }
            break;
          }
          case BenchMode::kVectorized: {
            indices.resize(static_cast<std::size_t>(config.batch_size));
            for (int b = 0; b < config.batch_size; ++b) {
              indices[static_cast<std::size_t>(b)] = base + static_cast<std::size_t>(b);
            }
            const auto batch = data::gather_batch(dataset, indices, model::Mode::kClassify);
            model::per_sample_gradients(config.model, params_view, batch, model::Mode::kClassify,
                                        std::nullopt, ws, batch_grads);
            dp::clip_rows(batch_grads, config.clip_norm);
            acc.add_shard(batch_grads);
            break;
          }
          case BenchMode::kSharded: {
            for (int s = 0; s < config.batch_size; s += config.shard_size) {
              const int rows = std::min(config.shard_size, config.batch_size - s);
              indices.resize(static_cast<std::size_t>(rows));
              for (int b = 0; b < rows; ++b) {
                indices[static_cast<std::size_t>(b)] =
                    base + static_cast<std::size_t>(s) + static_cast<std::size_t>(b);
              }
              const auto batch = data::gather_batch(dataset, indices, model::Mode::kClassify);
              model::per_sample_gradients(config.model, params_view, batch,
                                          model::Mode::kClassify, std::nullopt, ws, grads);
              dp::clip_rows(grads, config.clip_norm);
              acc.add_shard(grads);
            }
            break;
          }
        }

        const auto noisy = dp::noisy_mean(acc, config.sigma, config.clip_norm, config.batch_size,
                                          noise, global_step);
        for (std::size_t i = 0; i < grad_step.size(); ++i) {
          grad_step[i] = static_cast<float>(noisy.mean[i]);
        }
        dp::adamw_step(opt, params.values, grad_step, config.lr, config.weight_decay, 0.9, 0.999,
                       1e-8);
        ++global_step;
      }
      const auto t1 = std::chrono::steady_clock::now();
      if (epoch > 0) {
        epoch_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
      }
    }

    std::sort(epoch_seconds.begin(), epoch_seconds.end());
    const std::size_t n = epoch_seconds.size();
    result.median_epoch_seconds = n % 2 == 1
                                      ? epoch_seconds[n / 2]
                                      : 0.5 * (epoch_seconds[n / 2 - 1] + epoch_seconds[n / 2]);
    result.epochs_measured = static_cast<int>(n);
    if (final_params != nullptr) *final_params = params.values;
  } catch (const std::bad_alloc&) {
    // out-of-memory in one cell must not sink the whole sweep
    result.median_epoch_seconds.reset();
    result.epochs_measured = 0;
    return result;
  }

  const auto hwm_after = vm_hwm_bytes();
  if (hwm_before && hwm_after && *hwm_after >= *hwm_before) {
    result.peak_memory_bytes = *hwm_after - *hwm_before;
  }
  return result;
}

void emit_bench_csv(std::span<const BenchResult> results, std::ostream& sink) {
  std::vector<BenchResult> sorted(results.begin(), results.end());
  std::sort(sorted.begin(), sorted.end(), [](const BenchResult& a, const BenchResult& b) {
    const auto an = mode_name(a.mode);
    const auto bn = mode_name(b.mode);
    return an != bn ? an < bn : a.batch_size < b.batch_size;
  });
  sink << "mode,batch_size,median_epoch_seconds,peak_memory_bytes,epochs_measured\n";
  for (const auto& r : sorted) {
    sink << mode_name(r.mode) << ',' << r.batch_size << ','
         << (r.median_epoch_seconds ? format_real(*r.median_epoch_seconds) : std::string()) << ','
         << (r.peak_memory_bytes ? std::to_string(*r.peak_memory_bytes) : std::string()) << ','
         << r.epochs_measured << '\n';
  }
  if (!sink) throw IoError("emit_bench_csv: write failure");
}

}  // namespace dpge::bench
