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
#ifndef DPGE_TESTS_SUPPORT_MODEL_HELPERS_HPP_
#define DPGE_TESTS_SUPPORT_MODEL_HELPERS_HPP_

#include <algorithm>
#include <cmath>
#include <vector>

#include "dpge/model.hpp"
#include "dpge/rng.hpp"

namespace dpge::testsup {

// Random pretraining batch: uniform tokens, two segments, a padded tail and
// `masks_per_example` masked positions.
inline model::Batch random_pretrain_batch(const model::ModelConfig& c, int batch, std::uint64_t seed,
                                          bool with_nsp = true, int masks_per_example = 3,
                                          int pad_tail = 3) {
  rng::Stream stream(seed, 0xBA7C4);
  const int L = c.max_seq_len;
  model::Batch b;
  b.batch_size = batch;
  b.seq_len = L;
  const std::size_t n = static_cast<std::size_t>(batch) * L;
  b.token_ids.resize(n);
  b.segment_ids.resize(n);
  b.attention_mask.resize(n);
  b.mlm_targets.assign(n, -1);
  const auto vocab_span =
      static_cast<std::uint64_t>(c.vocab_size - model::kNumSpecialTokens);
  for (int e = 0; e < batch; ++e) {
    const std::size_t base = static_cast<std::size_t>(e) * L;
    const int live = L - pad_tail;
    for (int l = 0; l < L; ++l) {
      const bool pad = l >= live;
      b.token_ids[base + l] =
          pad ? model::kPadId
              : static_cast<std::int32_t>(model::kNumSpecialTokens + stream.uniform_int(vocab_span));
      b.segment_ids[base + l] = l < live / 2 ? 0 : 1;
      b.attention_mask[base + l] = pad ? 0 : 1;
    }
    b.token_ids[base] = model::kClsId;
    for (int m = 0; m < masks_per_example; ++m) {
      const int pos = 1 + static_cast<int>(stream.uniform_int(static_cast<std::uint64_t>(live - 1)));
      b.mlm_targets[base + pos] = static_cast<std::int32_t>(
          model::kNumSpecialTokens + stream.uniform_int(vocab_span));
      b.token_ids[base + pos] = model::kMaskId;
    }
    if (with_nsp) b.nsp_labels.push_back(static_cast<std::int32_t>(stream.uniform_int(2)));
  }
  return b;
}

inline model::Batch random_classify_batch(const model::ModelConfig& c, int batch,
                                          std::uint64_t seed, int pad_tail = 3) {
  rng::Stream stream(seed, 0xC1A55F);
  const int L = c.max_seq_len;
  model::Batch b;
  b.batch_size = batch;
  b.seq_len = L;
  const std::size_t n = static_cast<std::size_t>(batch) * L;
  b.token_ids.resize(n);
  b.segment_ids.assign(n, 0);
  b.attention_mask.resize(n);
  const auto vocab_span =
      static_cast<std::uint64_t>(c.vocab_size - model::kNumSpecialTokens);
  for (int e = 0; e < batch; ++e) {
    const std::size_t base = static_cast<std::size_t>(e) * L;
    const int live = L - pad_tail;
    for (int l = 0; l < L; ++l) {
      const bool pad = l >= live;
      b.token_ids[base + l] =
          pad ? model::kPadId
              : static_cast<std::int32_t>(model::kNumSpecialTokens + stream.uniform_int(vocab_span));
      b.attention_mask[base + l] = pad ? 0 : 1;
    }
    b.token_ids[base] = model::kClsId;
    b.class_labels.push_back(static_cast<std::int32_t>(stream.uniform_int(2)));
  }
  return b;
}

inline double mean_loss_f64(const model::ModelConfig& c, const std::vector<double>& params,
                            const model::Batch& batch, model::Mode mode) {
  const auto out = model::forward<double>(c, params, batch, mode);
  double total = 0.0;
  for (const double l : out.losses) total += l;
  return total / static_cast<double>(batch.batch_size);
}

// Five-point central difference of the mean loss along one coordinate.
inline double fd_gradient(const model::ModelConfig& c, std::vector<double> params,
                          const model::Batch& batch, model::Mode mode, std::size_t coord) {
  const double h = 1e-3 * std::max(0.25, std::abs(params[coord]));
  const double x = params[coord];
  const auto eval = [&](double offset) {
    params[coord] = x + offset;
    return mean_loss_f64(c, params, batch, mode);
  };
  const double v = (eval(-2.0 * h) - 8.0 * eval(-h) + 8.0 * eval(h) - eval(2.0 * h)) / (12.0 * h);
  params[coord] = x;
  return v;
}

inline std::vector<double> widen(const std::vector<float>& x) {
  return std::vector<double>(x.begin(), x.end());
}

}  // namespace dpge::testsup

#endif  // DPGE_TESTS_SUPPORT_MODEL_HELPERS_HPP_
