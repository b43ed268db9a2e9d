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
#ifndef DPGE_MODEL_HPP_
#define DPGE_MODEL_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// A small transformer encoder with MLM, NSP and sequence-classification
// heads, differentiated by a hand-written reverse pass. Exposes batch
// gradients and per-example gradients over a flat parameter vector.
//
// Everything is templated on the scalar type: float is the production
// precision, double is the test mode used for finite-difference oracles.

namespace dpge::model {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kNumSpecialTokens = 5;
inline constexpr int kNumClasses = 2;

struct ModelConfig {
  int vocab_size = 2048;
  int max_seq_len = 64;
  int num_layers = 2;
  int hidden_dim = 64;
  int num_heads = 4;
  int ff_dim = 128;
  double dropout_rate = 0.0;

  void validate() const;
};

struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::size_t> shape;

  std::size_t size() const;
};

// Ordered map from layer names to slices of the flat parameter vector. The
// slices tile [0, param_count) exactly, in layout order.
class Registry {
 public:
  static Registry build(const ModelConfig& config);

  const std::vector<ParamSlice>& slices() const { return slices_; }
  const ParamSlice& at(std::string_view name) const;
  std::size_t param_count() const { return param_count_; }
  // Checks the tiling invariant; throws ValidationError on gaps or overlaps.
  void validate() const;

 private:
  std::vector<ParamSlice> slices_;
  std::size_t param_count_ = 0;
};

struct ParamVector {
  std::vector<float> values;
  Registry registry;
};

std::size_t param_count(const ModelConfig& config);

// Truncated-normal(0.02, +-2 std) weights, zero biases, unit layer-norm
// gains. Deterministic in (config, seed).
ParamVector init_params(const ModelConfig& config, std::uint64_t seed);

enum class Mode { kPretrain, kClassify };

struct Batch {
  int batch_size = 0;
  int seq_len = 0;
  // Row-major batch_size x seq_len.
  std::vector<std::int32_t> token_ids;
  std::vector<std::int32_t> segment_ids;
  std::vector<std::int32_t> attention_mask;
  std::vector<std::int32_t> mlm_targets;  // -1 = unmasked
  // Exactly one of the label sets below may be populated (size batch_size).
  std::vector<std::int32_t> nsp_labels;
  std::vector<std::int32_t> class_labels;

  void validate(const ModelConfig& config, Mode mode) const;
  Batch slice(int begin, int count) const;
};

template <typename T>
struct PerSampleGrads {
  int batch_size = 0;
  std::size_t param_count = 0;
  std::vector<T> rows;  // batch_size x param_count

  void reset(int b, std::size_t p) {
    batch_size = b;
    param_count = p;
    rows.assign(static_cast<std::size_t>(b) * p, T(0));
  }
  T* row(int b) { return rows.data() + static_cast<std::size_t>(b) * param_count; }
  const T* row(int b) const { return rows.data() + static_cast<std::size_t>(b) * param_count; }
};

using PerSampleGradMatrix = PerSampleGrads<float>;

template <typename T>
struct ForwardOutput {
  std::vector<T> losses;       // per-example loss, length B
  std::vector<T> mlm_losses;   // per-example MLM component (0 when unmasked)
  std::vector<int> masked_counts;
  std::vector<int> mlm_predictions;  // argmax per masked position
  std::vector<int> mlm_targets;      // gold ids, aligned with predictions
  std::vector<T> nsp_logits;  // B x 2 when NSP labels present
  std::vector<T> cls_logits;  // B x 2 in classify mode
};

namespace detail {

template <typename T>
struct LayerBuffers {
  std::vector<T> q, k, v, probs, z, attn_out, x2, u, g, ffn_out, x_out;
  std::vector<T> ln1_mean, ln1_inv, ln2_mean, ln2_inv;
  std::vector<T> r1, r2;
  std::vector<T> drop_attn, drop_ffn;
};

}  // namespace detail

// Scratch for one forward/backward over a shard; reusable across calls.
template <typename T>
struct Workspace {
  int batch_size = 0;
  int seq_len = 0;
  std::vector<detail::LayerBuffers<T>> layers;
  std::vector<T> x0, x1, drop_emb;
  std::vector<T> ln_e_mean, ln_e_inv;
  std::vector<T> pooled;
  std::vector<int> masked_example, masked_position;
  std::vector<std::int32_t> masked_target;
  std::vector<T> mlm_hidden;  // Nm x D
  std::vector<T> mlm_probs;   // Nm x V (logits during forward, probs after)
  std::vector<T> nsp_probs, cls_probs;
  // backward scratch
  std::vector<T> dx, dq, dk, dv, dz, dscores, dprobs, du, dg;
  std::vector<T> dmlm_hidden, dpooled, dhead;
  std::vector<double> grad_acc;        // batch-gradient 64-bit accumulator
  PerSampleGrads<T> staging_grads;     // hot per-tile rows, copied out once

  void prepare(const ModelConfig& config, int b);
};

// Per-example losses and logits. Dropout is active only when a seed is given
// and the configured rate is positive.
template <typename T>
ForwardOutput<T> forward(const ModelConfig& config, std::span<const T> params, const Batch& batch,
                         Mode mode, std::optional<std::uint64_t> dropout_seed, Workspace<T>& ws);

// Gradient of the mean per-example loss; writes into grad (length P).
template <typename T>
ForwardOutput<T> batch_gradient(const ModelConfig& config, std::span<const T> params,
                                const Batch& batch, Mode mode,
                                std::optional<std::uint64_t> dropout_seed, Workspace<T>& ws,
                                std::span<T> grad);

// One unscaled gradient row per example.
template <typename T>
ForwardOutput<T> per_sample_gradients(const ModelConfig& config, std::span<const T> params,
                                      const Batch& batch, Mode mode,
                                      std::optional<std::uint64_t> dropout_seed, Workspace<T>& ws,
                                      PerSampleGrads<T>& out);

// Convenience overloads with a throwaway workspace.
template <typename T>
ForwardOutput<T> forward(const ModelConfig& config, std::span<const T> params, const Batch& batch,
                         Mode mode, std::optional<std::uint64_t> dropout_seed = std::nullopt);
template <typename T>
ForwardOutput<T> batch_gradient(const ModelConfig& config, std::span<const T> params,
                                const Batch& batch, Mode mode, std::span<T> grad);
template <typename T>
ForwardOutput<T> per_sample_gradients(const ModelConfig& config, std::span<const T> params,
                                      const Batch& batch, Mode mode, PerSampleGrads<T>& out);

}  // namespace dpge::model

#endif  // DPGE_MODEL_HPP_
