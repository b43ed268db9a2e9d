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
#ifndef DPGE_TELEMETRY_HPP_
#define DPGE_TELEMETRY_HPP_

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

namespace dpge::telemetry {

struct MetricsRecord {
  std::uint64_t step = 0;
  double train_loss = 0.0;
  std::optional<double> eval_loss;
  std::optional<double> mlm_acc;
  std::optional<double> nsp_acc;
  std::optional<double> snr;
  std::optional<double> epsilon_spent;
  double lr = 0.0;
  int batch_size = 0;
};

// ||clipped_sum|| / ||noise||. Zero-norm noise (only possible at sigma = 0,
// where the ratio is undefined) is a domain error.
double gradient_snr(std::span<const double> clipped_sum, std::span<const double> noise);
double gradient_snr_from_norms(double signal_norm, double noise_norm);

// Fraction of argmax-correct predictions over masked positions; argmax ties
// break toward the smallest index. Absent (not 0) when there are no masked
// positions.
std::optional<double> mlm_accuracy(std::span<const float> logits,
                                   std::span<const std::int32_t> targets, int vocab_size);
std::optional<double> accuracy_from_predictions(std::span<const int> predictions,
                                                std::span<const std::int32_t> targets);

std::optional<double> nsp_accuracy(std::span<const float> logits,
                                   std::span<const std::int32_t> labels);

// Unweighted mean of per-class F1; a class absent from both predictions and
// labels contributes 0. Empty input is a domain error.
double macro_f1(std::span<const int> predictions, std::span<const int> labels, int num_classes);

// Header: step,train_loss,eval_loss,mlm_acc,nsp_acc,snr,epsilon_spent,lr,batch_size
// Absent optionals serialize as empty fields; reals use 9 significant digits.
void emit_metrics_csv(std::span<const MetricsRecord> records, std::ostream& sink);

struct SnrRecord {
  std::uint64_t step = 0;
  double snr = 0.0;
  int batch_size = 0;
  double lr = 0.0;
};

// Header: step,snr,batch_size,lr
void emit_snr_csv(std::span<const SnrRecord> records, std::ostream& sink);

}  // namespace dpge::telemetry

#endif  // DPGE_TELEMETRY_HPP_
