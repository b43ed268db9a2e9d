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
#include "dpge/telemetry.hpp"

#include <cmath>
#include <cstdio>

#include "dpge/error.hpp"
#include "dpge/kernels.hpp"

namespace dpge::telemetry {
namespace {

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::string format_optional(const std::optional<double>& v) {
  return v.has_value() ? format_real(*v) : std::string();
}

}  // namespace

double gradient_snr_from_norms(double signal_norm, double noise_norm) {
  if (noise_norm <= 0.0) {
    throw ValidationError("gradient_snr: noise norm is zero (undefined at sigma = 0)");
  }
  return signal_norm / noise_norm;
}

double gradient_snr(std::span<const double> clipped_sum, std::span<const double> noise) {
  const double s = std::sqrt(kern::sum_sq(clipped_sum.data(), clipped_sum.size()));
  const double n = std::sqrt(kern::sum_sq(noise.data(), noise.size()));
  return gradient_snr_from_norms(s, n);
}

std::optional<double> mlm_accuracy(std::span<const float> logits,
                                   std::span<const std::int32_t> targets, int vocab_size) {
  if (vocab_size <= 0) throw ValidationError("mlm_accuracy: vocab_size must be positive");
  if (logits.size() != targets.size() * static_cast<std::size_t>(vocab_size)) {
    throw ValidationError("mlm_accuracy: logits shape does not match targets");
  }
  if (targets.empty()) return std::nullopt;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const float* row = logits.data() + i * static_cast<std::size_t>(vocab_size);
    int argmax = 0;
    for (int j = 1; j < vocab_size; ++j) {
      if (row[j] > row[argmax]) argmax = j;
    }
    if (argmax == targets[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(targets.size());
}

std::optional<double> accuracy_from_predictions(std::span<const int> predictions,
                                                std::span<const std::int32_t> targets) {
  if (predictions.size() != targets.size()) {
    throw ValidationError("accuracy: predictions and targets differ in length");
  }
  if (targets.empty()) return std::nullopt;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (predictions[i] == targets[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(targets.size());
}

std::optional<double> nsp_accuracy(std::span<const float> logits,
                                   std::span<const std::int32_t> labels) {
  if (logits.size() != labels.size() * 2) {
    throw ValidationError("nsp_accuracy: logits shape does not match labels");
  }
  if (labels.empty()) return std::nullopt;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int pred = logits[2 * i + 1] > logits[2 * i] ? 1 : 0;
    if (pred == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double macro_f1(std::span<const int> predictions, std::span<const int> labels, int num_classes) {
  if (predictions.empty() || predictions.size() != labels.size()) {
    throw ValidationError("macro_f1: inputs must be non-empty and the same length");
  }
  if (num_classes < 2) throw ValidationError("macro_f1: num_classes must be >= 2");
  double f1_sum = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (predictions[i] < 0 || predictions[i] >= num_classes || labels[i] < 0 ||
          labels[i] >= num_classes) {
        throw ValidationError("macro_f1: class index out of range");
      }
      const bool p = predictions[i] == c;
      const bool l = labels[i] == c;
      tp += p && l;
      fp += p && !l;
      fn += !p && l;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    // 2tp/(2tp+fp+fn); a class absent from predictions and labels scores 0
    f1_sum += denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  return f1_sum / static_cast<double>(num_classes);
}

void emit_metrics_csv(std::span<const MetricsRecord> records, std::ostream& sink) {
  sink << "step,train_loss,eval_loss,mlm_acc,nsp_acc,snr,epsilon_spent,lr,batch_size\n";
  for (const auto& r : records) {
    sink << r.step << ',' << format_real(r.train_loss) << ',' << format_optional(r.eval_loss)
         << ',' << format_optional(r.mlm_acc) << ',' << format_optional(r.nsp_acc) << ','
         << format_optional(r.snr) << ',' << format_optional(r.epsilon_spent) << ','
         << format_real(r.lr) << ',' << r.batch_size << '\n';
    if (!sink) throw IoError("emit_metrics_csv: write failure");
  }
  if (!sink) throw IoError("emit_metrics_csv: write failure");
}

void emit_snr_csv(std::span<const SnrRecord> records, std::ostream& sink) {
  sink << "step,snr,batch_size,lr\n";
  for (const auto& r : records) {
    sink << r.step << ',' << format_real(r.snr) << ',' << r.batch_size << ','
         << format_real(r.lr) << '\n';
    if (!sink) throw IoError("emit_snr_csv: write failure");
  }
  if (!sink) throw IoError("emit_snr_csv: write failure");
}

}  // namespace dpge::telemetry
