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
#include "dpge/model.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include <doctest.h>

#include "dpge/checkpoint.hpp"
#include "dpge/error.hpp"
#include "dpge/rng.hpp"
#include "support/model_helpers.hpp"

using namespace dpge;
using namespace dpge::model;
using namespace dpge::testsup;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 64;
  c.max_seq_len = 16;
  c.num_layers = 2;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ff_dim = 32;
  return c;
}

}  // namespace

TEST_CASE("registry tiles the parameter vector exactly") {
  const auto cfg = tiny_config();
  const auto reg = Registry::build(cfg);
  CHECK_NOTHROW(reg.validate());
  std::size_t total = 0;
  for (const auto& s : reg.slices()) {
    CHECK(s.offset == total);
    total += s.size();
  }
  CHECK(total == reg.param_count());
  CHECK(total == param_count(cfg));
  CHECK(reg.at("embeddings.token").shape ==
        std::vector<std::size_t>{static_cast<std::size_t>(cfg.vocab_size),
                                 static_cast<std::size_t>(cfg.hidden_dim)});
  CHECK_THROWS_AS(reg.at("nonexistent"), ValidationError);
}

TEST_CASE("init_params: determinism, seed sensitivity, layer-norm gains") {
  const auto cfg = tiny_config();
  const auto a = init_params(cfg, 7);
  const auto b = init_params(cfg, 7);
  const auto c = init_params(cfg, 8);
  CHECK(a.values == b.values);
  CHECK(a.values != c.values);

  for (const auto& slice : a.registry.slices()) {
    if (slice.name.ends_with("gain")) {
      for (std::size_t i = 0; i < slice.size(); ++i) {
        CHECK(a.values[slice.offset + i] == 1.0f);
      }
    } else if (slice.shape.size() == 1) {
      for (std::size_t i = 0; i < slice.size(); ++i) {
        CHECK(a.values[slice.offset + i] == 0.0f);
      }
    } else {
      // truncated normal: |w| <= 2 * 0.02
      for (std::size_t i = 0; i < slice.size(); ++i) {
        CHECK(std::abs(a.values[slice.offset + i]) <= 0.04f + 1e-7f);
      }
    }
  }
}

TEST_CASE("model config invariants") {
  auto cfg = tiny_config();
  cfg.hidden_dim = 15;  // not divisible by num_heads
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = tiny_config();
  cfg.vocab_size = 4;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("zero output head turns MLM loss into ln(V)") {
  const auto cfg = tiny_config();
  auto pv = init_params(cfg, 3);
  const auto& w = pv.registry.at("mlm_head.w");
  std::fill_n(pv.values.begin() + static_cast<std::ptrdiff_t>(w.offset), w.size(), 0.0f);

  auto batch = random_pretrain_batch(cfg, 2, 11, /*with_nsp=*/false, /*masks=*/1);
  const auto out = forward<float>(cfg, pv.values, batch, Mode::kPretrain);
  for (const float l : out.losses) {
    CHECK(l == doctest::Approx(std::log(static_cast<double>(cfg.vocab_size))).epsilon(1e-5));
  }
}

TEST_CASE("no masked positions and no NSP labels gives zero loss") {
  const auto cfg = tiny_config();
  const auto pv = init_params(cfg, 3);
  auto batch = random_pretrain_batch(cfg, 3, 11, /*with_nsp=*/false, /*masks=*/2);
  std::fill(batch.mlm_targets.begin(), batch.mlm_targets.end(), -1);
  const auto out = forward<float>(cfg, pv.values, batch, Mode::kPretrain);
  for (const float l : out.losses) CHECK(l == 0.0f);
  // and such examples contribute zero gradient
  PerSampleGradMatrix grads;
  per_sample_gradients(cfg, std::span<const float>(pv.values), batch, Mode::kPretrain, grads);
  for (int b = 0; b < batch.batch_size; ++b) {
    for (std::size_t i = 0; i < grads.param_count; ++i) CHECK(grads.row(b)[i] == 0.0f);
  }
}

TEST_CASE("losses are non-negative and permutation-equivariant") {
  const auto cfg = tiny_config();
  const auto pv = init_params(cfg, 5);
  const auto batch = random_pretrain_batch(cfg, 4, 21);
  const auto out = forward<float>(cfg, pv.values, batch, Mode::kPretrain);
  for (const float l : out.losses) CHECK(l >= 0.0f);

  // reverse the batch rows and compare per-example losses bitwise
  model::Batch reversed = batch;
  const int L = batch.seq_len;
  for (int e = 0; e < batch.batch_size; ++e) {
    const int src = batch.batch_size - 1 - e;
    for (int l = 0; l < L; ++l) {
      const std::size_t di = static_cast<std::size_t>(e) * L + l;
      const std::size_t si = static_cast<std::size_t>(src) * L + l;
      reversed.token_ids[di] = batch.token_ids[si];
      reversed.segment_ids[di] = batch.segment_ids[si];
      reversed.attention_mask[di] = batch.attention_mask[si];
      reversed.mlm_targets[di] = batch.mlm_targets[si];
    }
    reversed.nsp_labels[static_cast<std::size_t>(e)] =
        batch.nsp_labels[static_cast<std::size_t>(src)];
  }
  const auto out_rev = forward<float>(cfg, pv.values, reversed, Mode::kPretrain);
  for (int e = 0; e < batch.batch_size; ++e) {
    CHECK(out_rev.losses[static_cast<std::size_t>(e)] ==
          out.losses[static_cast<std::size_t>(batch.batch_size - 1 - e)]);
  }
}

TEST_CASE("batch/mode mismatches are validation errors") {
  const auto cfg = tiny_config();
  const auto pv = init_params(cfg, 5);
  auto pretrain_batch = random_pretrain_batch(cfg, 2, 31);
  CHECK_THROWS_AS(forward<float>(cfg, pv.values, pretrain_batch, Mode::kClassify),
                  ValidationError);
  auto classify_batch = random_classify_batch(cfg, 2, 31);
  CHECK_THROWS_AS(forward<float>(cfg, pv.values, classify_batch, Mode::kPretrain),
                  ValidationError);
  // masked position on an attention-masked slot is invalid
  auto bad = random_pretrain_batch(cfg, 1, 33);
  bad.mlm_targets[static_cast<std::size_t>(bad.seq_len) - 1] = 7;  // pad slot
  CHECK_THROWS_AS(forward<float>(cfg, pv.values, bad, Mode::kPretrain), ValidationError);
}

TEST_CASE("batch_gradient matches central finite differences (64-bit mode)") {
  const auto cfg = tiny_config();
  const auto pv = init_params(cfg, 17);
  const auto params64 = widen(pv.values);

  rng::Stream pick(23, 0);
  for (const auto mode : {Mode::kPretrain, Mode::kClassify}) {
    const auto batch = mode == Mode::kPretrain ? random_pretrain_batch(cfg, 3, 41)
                                               : random_classify_batch(cfg, 3, 41);
    std::vector<double> grad(params64.size());
    batch_gradient<double>(cfg, params64, batch, mode, std::span<double>(grad));

    double worst = 0.0;
    for (int trial = 0; trial < 25; ++trial) {
      const std::size_t coord = pick.uniform_int(params64.size());
      const double fd = fd_gradient(cfg, params64, batch, mode, coord);
      const double rel = std::abs(fd - grad[coord]) /
                         std::max({std::abs(fd), std::abs(grad[coord]), 1e-3});
      worst = std::max(worst, rel);
    }
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("per-sample rows equal singleton-batch gradients") {
  const auto cfg = tiny_config();
  const auto pv = init_params(cfg, 19);
  const auto batch = random_pretrain_batch(cfg, 5, 43);

  PerSampleGradMatrix rows;
  per_sample_gradients(cfg, std::span<const float>(pv.values), batch, Mode::kPretrain, rows);

  std::vector<float> singleton(rows.param_count);
  for (int b = 0; b < batch.batch_size; ++b) {
    const auto one = batch.slice(b, 1);
    batch_gradient(cfg, std::span<const float>(pv.values), one, Mode::kPretrain,
                   std::span<float>(singleton));
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < singleton.size(); ++i) {
      const double d = static_cast<double>(rows.row(b)[i]) - singleton[i];
      num += d * d;
      den += static_cast<double>(singleton[i]) * singleton[i];
    }
    CHECK(std::sqrt(num) / (std::sqrt(den) + 1e-12) <= 1e-5);
  }
}

TEST_CASE("row-mean of per-sample gradients equals the batch gradient") {
  const auto cfg = tiny_config();
  const auto pv = init_params(cfg, 29);

  const auto check_mode = [&](const model::Batch& batch, Mode mode, bool strict) {
    PerSampleGradMatrix rows;
    per_sample_gradients(cfg, std::span<const float>(pv.values), batch, mode, rows);
    std::vector<float> grad(rows.param_count);
    batch_gradient(cfg, std::span<const float>(pv.values), batch, mode, std::span<float>(grad));

    double num = 0.0, den = 0.0, row_scale = 0.0;
    for (int b = 0; b < batch.batch_size; ++b) {
      double rn = 0.0;
      for (std::size_t i = 0; i < rows.param_count; ++i) {
        rn += static_cast<double>(rows.row(b)[i]) * rows.row(b)[i];
      }
      row_scale = std::max(row_scale, std::sqrt(rn));
    }
    for (std::size_t i = 0; i < grad.size(); ++i) {
      double mean = 0.0;
      for (int b = 0; b < batch.batch_size; ++b) mean += rows.row(b)[i];
      mean /= batch.batch_size;
      const double d = mean - grad[i];
      num += d * d;
      den += static_cast<double>(grad[i]) * grad[i];
    }
    if (strict) {
      CHECK(std::sqrt(num) / (std::sqrt(den) + 1e-12) <= 1e-5);
    } else {
      // When per-example gradients mostly cancel, float32 row storage alone
      // bounds how close the mean can sit to the batch gradient; compare
      // against the scale of the rows being averaged.
      const double scale = std::max(std::sqrt(den), row_scale / batch.batch_size);
      CHECK(std::sqrt(num) / (scale + 1e-12) <= 1e-5);
    }
  };
  check_mode(random_pretrain_batch(cfg, 6, 47), Mode::kPretrain, true);
  check_mode(random_classify_batch(cfg, 6, 47), Mode::kClassify, false);
}

TEST_CASE("identical examples produce identical per-sample rows") {
  const auto cfg = tiny_config();
  const auto pv = init_params(cfg, 31);
  auto batch = random_pretrain_batch(cfg, 1, 53);
  // duplicate the single example four times
  model::Batch dup;
  dup.batch_size = 4;
  dup.seq_len = batch.seq_len;
  for (int i = 0; i < 4; ++i) {
    dup.token_ids.insert(dup.token_ids.end(), batch.token_ids.begin(), batch.token_ids.end());
    dup.segment_ids.insert(dup.segment_ids.end(), batch.segment_ids.begin(),
                           batch.segment_ids.end());
    dup.attention_mask.insert(dup.attention_mask.end(), batch.attention_mask.begin(),
                              batch.attention_mask.end());
    dup.mlm_targets.insert(dup.mlm_targets.end(), batch.mlm_targets.begin(),
                           batch.mlm_targets.end());
    dup.nsp_labels.push_back(batch.nsp_labels[0]);
  }
  PerSampleGradMatrix rows;
  per_sample_gradients(cfg, std::span<const float>(pv.values), dup, Mode::kPretrain, rows);
  for (int b = 1; b < 4; ++b) {
    for (std::size_t i = 0; i < rows.param_count; ++i) {
      CHECK(rows.row(b)[i] == rows.row(0)[i]);
    }
  }

  // duplicated-example batch gradient equals the singleton gradient
  std::vector<float> g_dup(rows.param_count), g_one(rows.param_count);
  batch_gradient(cfg, std::span<const float>(pv.values), dup, Mode::kPretrain,
                 std::span<float>(g_dup));
  batch_gradient(cfg, std::span<const float>(pv.values), batch, Mode::kPretrain,
                 std::span<float>(g_one));
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < g_dup.size(); ++i) {
    const double d = static_cast<double>(g_dup[i]) - g_one[i];
    num += d * d;
    den += static_cast<double>(g_one[i]) * g_one[i];
  }
  CHECK(std::sqrt(num) / (std::sqrt(den) + 1e-12) <= 1e-5);
}

TEST_CASE("classifier-head per-sample rows match the closed-form outer product") {
  const auto cfg = tiny_config();
  const auto pv = init_params(cfg, 37);
  const auto batch = random_classify_batch(cfg, 3, 59);

  Workspace<float> ws;
  PerSampleGradMatrix rows;
  const auto out = per_sample_gradients(cfg, std::span<const float>(pv.values), batch,
                                        Mode::kClassify, std::nullopt, ws, rows);
  const auto& wslice = pv.registry.at("classifier.w");
  const int D = cfg.hidden_dim;
  for (int b = 0; b < batch.batch_size; ++b) {
    const float* logits = out.cls_logits.data() + 2 * b;
    const double m = std::max(logits[0], logits[1]);
    const double e0 = std::exp(logits[0] - m), e1 = std::exp(logits[1] - m);
    double probs[2] = {e0 / (e0 + e1), e1 / (e0 + e1)};
    probs[batch.class_labels[static_cast<std::size_t>(b)]] -= 1.0;
    const float* pooled = ws.pooled.data() + static_cast<std::size_t>(b) * D;
    const float* got = rows.row(b) + wslice.offset;
    for (int d = 0; d < D; ++d) {
      for (int c = 0; c < 2; ++c) {
        const double want = static_cast<double>(pooled[d]) * probs[c];
        CHECK(std::abs(got[d * 2 + c] - want) <= 1e-5 * std::max(1.0, std::abs(want)));
      }
    }
  }
}

TEST_CASE("dropout: seeded determinism, zero rate is a no-op") {
  auto cfg = tiny_config();
  const auto pv = init_params(cfg, 41);
  const auto batch = random_pretrain_batch(cfg, 2, 61);

  const auto base = forward<float>(cfg, pv.values, batch, Mode::kPretrain);
  const auto with_seed_rate0 = forward<float>(cfg, pv.values, batch, Mode::kPretrain, 99);
  CHECK(base.losses == with_seed_rate0.losses);

  cfg.dropout_rate = 0.2;
  const auto d1 = forward<float>(cfg, pv.values, batch, Mode::kPretrain, 99);
  const auto d2 = forward<float>(cfg, pv.values, batch, Mode::kPretrain, 99);
  const auto d3 = forward<float>(cfg, pv.values, batch, Mode::kPretrain, 100);
  CHECK(d1.losses == d2.losses);
  CHECK(d1.losses != d3.losses);
  // no seed -> dropout inactive even at positive rate
  const auto no_seed = forward<float>(cfg, pv.values, batch, Mode::kPretrain);
  CHECK(no_seed.losses == base.losses);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const auto cfg = tiny_config();
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.params = init_params(cfg, 43);
  ckpt.step = 123;
  ckpt.seeds = {1, 2, 3, 4};
  ckpt.epsilon_spent = 4.5;

  const auto path = std::filesystem::temp_directory_path() / "dpge_test_ckpt.dpge";
  save_checkpoint(path.string(), ckpt);
  const auto loaded = load_checkpoint(path.string());
  CHECK(loaded.params.values == ckpt.params.values);
  CHECK(loaded.step == 123);
  CHECK(loaded.seeds.noise == 3);
  CHECK(loaded.epsilon_spent == 4.5);
  CHECK(loaded.config.vocab_size == cfg.vocab_size);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/path.dpge"), IoError);
}
