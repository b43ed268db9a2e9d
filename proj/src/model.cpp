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

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "dpge/error.hpp"
#include "dpge/kernels.hpp"
#include "dpge/rng.hpp"
#include "dpge/threadpool.hpp"

namespace dpge::model {
namespace {

constexpr double kLnEps = 1e-5;
constexpr double kMaskScore = -1e9;
constexpr double kInitStd = 0.02;
constexpr double kInitTrunc = 2.0;  // in units of std
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void require(bool ok, const std::string& message) {
  if (!ok) throw ValidationError(message);
}

template <typename T>
inline T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(kInvSqrt2)));
}

template <typename T>
inline T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(kInvSqrt2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(kInvSqrt2Pi);
  return cdf + x * pdf;
}

// Offsets of every parameter slice, resolved once per config.
struct Layout {
  int V, L, D, H, F, Dh;
  std::size_t total;
  std::size_t tok_emb, pos_emb, seg_emb, emb_gain, emb_bias;
  struct Layer {
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo, ln1_gain, ln1_bias;
    std::size_t w1, b1, w2, b2, ln2_gain, ln2_bias;
  };
  std::vector<Layer> layers;
  std::size_t pooler_w, pooler_b, mlm_w, mlm_b, nsp_w, nsp_b, cls_w, cls_b;

  static Layout build(const ModelConfig& c) {
    Layout lo;
    lo.V = c.vocab_size;
    lo.L = c.max_seq_len;
    lo.D = c.hidden_dim;
    lo.H = c.num_heads;
    lo.F = c.ff_dim;
    lo.Dh = c.hidden_dim / c.num_heads;
    const std::size_t V = static_cast<std::size_t>(lo.V);
    const std::size_t L = static_cast<std::size_t>(lo.L);
    const std::size_t D = static_cast<std::size_t>(lo.D);
    const std::size_t F = static_cast<std::size_t>(lo.F);
    std::size_t at = 0;
    const auto take = [&at](std::size_t n) {
      const std::size_t off = at;
      at += n;
      return off;
    };
    lo.tok_emb = take(V * D);
    lo.pos_emb = take(L * D);
    lo.seg_emb = take(2 * D);
    lo.emb_gain = take(D);
    lo.emb_bias = take(D);
    lo.layers.resize(static_cast<std::size_t>(c.num_layers));
    for (auto& l : lo.layers) {
      l.wq = take(D * D);
      l.bq = take(D);
      l.wk = take(D * D);
      l.bk = take(D);
      l.wv = take(D * D);
      l.bv = take(D);
      l.wo = take(D * D);
      l.bo = take(D);
      l.ln1_gain = take(D);
      l.ln1_bias = take(D);
      l.w1 = take(D * F);
      l.b1 = take(F);
      l.w2 = take(F * D);
      l.b2 = take(D);
      l.ln2_gain = take(D);
      l.ln2_bias = take(D);
    }
    lo.pooler_w = take(D * D);
    lo.pooler_b = take(D);
    lo.mlm_w = take(D * V);
    lo.mlm_b = take(V);
    lo.nsp_w = take(D * kNumClasses);
    lo.nsp_b = take(kNumClasses);
    lo.cls_w = take(D * kNumClasses);
    lo.cls_b = take(kNumClasses);
    lo.total = at;
    return lo;
  }
};

template <typename T>
void add_bias(T* rows, std::size_t n_rows, const T* bias, std::size_t dim) {
  for (std::size_t r = 0; r < n_rows; ++r) kern::axpy(rows + r * dim, bias, T(1), dim);
}

template <typename T>
void layer_norm_forward(const T* x, const T* gain, const T* bias, T* out, T* mean, T* inv,
                        std::size_t rows, int dim) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * dim;
    double mu = 0.0;
    for (int j = 0; j < dim; ++j) mu += static_cast<double>(xr[j]);
    mu /= dim;
    double var = 0.0;
    for (int j = 0; j < dim; ++j) {
      const double d = static_cast<double>(xr[j]) - mu;
      var += d * d;
    }
    var /= dim;
    const double istd = 1.0 / std::sqrt(var + kLnEps);
    mean[r] = static_cast<T>(mu);
    inv[r] = static_cast<T>(istd);
    T* yr = out + r * dim;
    for (int j = 0; j < dim; ++j) {
      yr[j] = gain[j] * static_cast<T>((static_cast<double>(xr[j]) - mu) * istd) + bias[j];
    }
  }
}

// Sinks decide where weight gradients accumulate: one shared vector for the
// batch gradient (64-bit accumulation, cast once at the end), one float row
// per example for per-sample gradients. Storage is pre-zeroed by the caller.
template <typename T>
struct BatchSink {
  using Acc = double;
  double* grad;
  T loss_scale;
  static constexpr bool kPerExample = false;
  double* slot(int, std::size_t offset) const { return grad + offset; }
  T scale(int) const { return loss_scale; }
};

template <typename T>
struct PerSampleSink {
  using Acc = T;
  PerSampleGrads<T>* out;
  int base = 0;  // row offset when the batch is processed in tiles
  static constexpr bool kPerExample = true;
  T* slot(int b, std::size_t offset) const { return out->row(base + b) + offset; }
  T scale(int) const { return T(1); }
};

// slot += row (widening when the sink accumulates in double)
template <typename T, typename Acc>
inline void accum_into(Acc* slot, const T* row, std::size_t n) {
  if constexpr (std::is_same_v<Acc, T>) {
    kern::axpy(slot, row, T(1), n);
  } else {
    kern::accum_f64(slot, row, n);
  }
}

// slot (k_dim x n_dim) += acts^T grads
template <typename T, typename Acc>
inline void tn_into(Acc* slot, const T* acts, std::size_t lda, const T* grads, std::size_t ldb,
                    std::size_t rows, std::size_t k_dim, std::size_t n_dim) {
  if constexpr (std::is_same_v<Acc, T>) {
    kern::matmul_tn(slot, n_dim, acts, lda, grads, ldb, rows, k_dim, n_dim, true);
  } else {
    kern::matmul_tn_wide(slot, n_dim, acts, lda, grads, ldb, rows, k_dim, n_dim);
  }
}

// dW (k_dim x n_dim) += acts^T grads, per example or over the whole batch.
template <typename T, typename Sink>
void weight_grad(const Sink& sink, std::size_t w_off, const T* acts, std::size_t lda,
                 const T* grads, std::size_t ldb, int batch, int rows_per_example,
                 std::size_t k_dim, std::size_t n_dim) {
  if constexpr (Sink::kPerExample) {
    for (int b = 0; b < batch; ++b) {
      tn_into(sink.slot(b, w_off), acts + static_cast<std::size_t>(b) * rows_per_example * lda,
              lda, grads + static_cast<std::size_t>(b) * rows_per_example * ldb, ldb,
              static_cast<std::size_t>(rows_per_example), k_dim, n_dim);
    }
  } else {
    tn_into(sink.slot(0, w_off), acts, lda, grads, ldb,
            static_cast<std::size_t>(batch) * rows_per_example, k_dim, n_dim);
  }
}

template <typename T, typename Sink>
void bias_grad(const Sink& sink, std::size_t b_off, const T* grads, std::size_t ldb, int batch,
               int rows_per_example, std::size_t dim) {
  for (int b = 0; b < batch; ++b) {
    auto* slot = sink.slot(b, b_off);
    const T* g = grads + static_cast<std::size_t>(b) * rows_per_example * ldb;
    for (int r = 0; r < rows_per_example; ++r) accum_into(slot, g + r * ldb, dim);
  }
}

// In-place layer-norm backward over `dy`; also accumulates gain/bias grads.
template <typename T, typename Sink>
void layer_norm_backward(const Sink& sink, std::size_t gain_off, std::size_t bias_off,
                         const T* gain, const T* x_pre, const T* mean, const T* inv, T* dy,
                         int batch, int rows_per_example, int dim) {
  for (int b = 0; b < batch; ++b) {
    auto* dgain = sink.slot(b, gain_off);
    auto* dbias = sink.slot(b, bias_off);
    for (int r = 0; r < rows_per_example; ++r) {
      const std::size_t row = static_cast<std::size_t>(b) * rows_per_example + r;
      const T* xr = x_pre + row * dim;
      T* dyr = dy + row * dim;
      const double mu = static_cast<double>(mean[row]);
      const double istd = static_cast<double>(inv[row]);
      double m1 = 0.0, m2 = 0.0;
      for (int j = 0; j < dim; ++j) {
        const double xh = (static_cast<double>(xr[j]) - mu) * istd;
        const double a = static_cast<double>(dyr[j]) * static_cast<double>(gain[j]);
        dgain[j] += static_cast<double>(dyr[j]) * xh;
        dbias[j] += dyr[j];
        m1 += a;
        m2 += a * xh;
      }
      m1 /= dim;
      m2 /= dim;
      for (int j = 0; j < dim; ++j) {
        const double xh = (static_cast<double>(xr[j]) - mu) * istd;
        const double a = static_cast<double>(dyr[j]) * static_cast<double>(gain[j]);
        dyr[j] = static_cast<T>((a - m1 - xh * m2) * istd);
      }
    }
  }
}

template <typename T>
void fill_dropout_mask(std::vector<T>& mask, std::size_t n, double rate, std::uint64_t seed,
                       std::uint64_t site) {
  mask.resize(n);
  rng::Stream stream(seed, 0x0D0Full + site);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = stream.uniform() < rate ? T(0) : keep_scale;
  }
}

}  // namespace

void ModelConfig::validate() const {
  require(vocab_size >= kNumSpecialTokens, "model config: vocab_size must be >= 5");
  require(max_seq_len > 0, "model config: max_seq_len must be positive");
  require(num_layers > 0, "model config: num_layers must be positive");
  require(hidden_dim > 0, "model config: hidden_dim must be positive");
  require(num_heads > 0, "model config: num_heads must be positive");
  require(hidden_dim % num_heads == 0, "model config: hidden_dim must be divisible by num_heads");
  require(ff_dim > 0, "model config: ff_dim must be positive");
  require(dropout_rate >= 0.0 && dropout_rate < 1.0, "model config: dropout_rate must lie in [0, 1)");
}

std::size_t ParamSlice::size() const {
  std::size_t n = 1;
  for (const std::size_t d : shape) n *= d;
  return n;
}

Registry Registry::build(const ModelConfig& config) {
  config.validate();
  const Layout lo = Layout::build(config);
  const std::size_t V = static_cast<std::size_t>(lo.V);
  const std::size_t L = static_cast<std::size_t>(lo.L);
  const std::size_t D = static_cast<std::size_t>(lo.D);
  const std::size_t F = static_cast<std::size_t>(lo.F);
  const std::size_t C = kNumClasses;

  Registry reg;
  const auto push = [&reg](std::string name, std::size_t offset, std::vector<std::size_t> shape) {
    reg.slices_.push_back(ParamSlice{std::move(name), offset, std::move(shape)});
  };
  push("embeddings.token", lo.tok_emb, {V, D});
  push("embeddings.position", lo.pos_emb, {L, D});
  push("embeddings.segment", lo.seg_emb, {2, D});
  push("embeddings.ln_gain", lo.emb_gain, {D});
  push("embeddings.ln_bias", lo.emb_bias, {D});
  for (std::size_t i = 0; i < lo.layers.size(); ++i) {
    const auto& l = lo.layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    push(p + "attn.wq", l.wq, {D, D});
    push(p + "attn.bq", l.bq, {D});
    push(p + "attn.wk", l.wk, {D, D});
    push(p + "attn.bk", l.bk, {D});
    push(p + "attn.wv", l.wv, {D, D});
    push(p + "attn.bv", l.bv, {D});
    push(p + "attn.wo", l.wo, {D, D});
    push(p + "attn.bo", l.bo, {D});
    push(p + "attn.ln_gain", l.ln1_gain, {D});
    push(p + "attn.ln_bias", l.ln1_bias, {D});
    push(p + "ffn.w1", l.w1, {D, F});
    push(p + "ffn.b1", l.b1, {F});
    push(p + "ffn.w2", l.w2, {F, D});
    push(p + "ffn.b2", l.b2, {D});
    push(p + "ffn.ln_gain", l.ln2_gain, {D});
    push(p + "ffn.ln_bias", l.ln2_bias, {D});
  }
  push("pooler.w", lo.pooler_w, {D, D});
  push("pooler.b", lo.pooler_b, {D});
  push("mlm_head.w", lo.mlm_w, {D, V});
  push("mlm_head.b", lo.mlm_b, {V});
  push("nsp_head.w", lo.nsp_w, {D, C});
  push("nsp_head.b", lo.nsp_b, {C});
  push("classifier.w", lo.cls_w, {D, C});
  push("classifier.b", lo.cls_b, {C});
  reg.param_count_ = lo.total;
  reg.validate();
  return reg;
}

const ParamSlice& Registry::at(std::string_view name) const {
  for (const auto& s : slices_) {
    if (s.name == name) return s;
  }
  throw ValidationError("registry: unknown parameter slice '" + std::string(name) + "'");
}

void Registry::validate() const {
  std::size_t cursor = 0;
  for (const auto& s : slices_) {
    if (s.offset != cursor) {
      throw ValidationError("registry: slice '" + s.name + "' does not tile the vector");
    }
    cursor += s.size();
  }
  if (cursor != param_count_) {
    throw ValidationError("registry: slices do not cover the full parameter vector");
  }
}

std::size_t param_count(const ModelConfig& config) {
  config.validate();
  return Layout::build(config).total;
}

ParamVector init_params(const ModelConfig& config, std::uint64_t seed) {
  ParamVector pv;
  pv.registry = Registry::build(config);
  pv.values.assign(pv.registry.param_count(), 0.0f);
  rng::Stream stream(seed, 0x1217);
  for (const auto& slice : pv.registry.slices()) {
    float* out = pv.values.data() + slice.offset;
    const std::size_t n = slice.size();
    if (slice.shape.size() == 2) {
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = static_cast<float>(kInitStd * stream.truncated_normal(kInitTrunc));
      }
    } else if (slice.name.ends_with("gain")) {
      std::fill_n(out, n, 1.0f);
    }
    // biases stay zero
  }
  return pv;
}

void Batch::validate(const ModelConfig& config, Mode mode) const {
  require(batch_size > 0, "batch: batch_size must be positive");
  require(seq_len > 0 && seq_len <= config.max_seq_len,
          "batch: seq_len must lie in [1, max_seq_len]");
  const std::size_t n = static_cast<std::size_t>(batch_size) * seq_len;
  require(token_ids.size() == n, "batch: token_ids must be batch_size x seq_len");
  require(segment_ids.size() == n, "batch: segment_ids must be batch_size x seq_len");
  require(attention_mask.size() == n, "batch: attention_mask must be batch_size x seq_len");
  for (std::size_t i = 0; i < n; ++i) {
    require(token_ids[i] >= 0 && token_ids[i] < config.vocab_size, "batch: token id out of range");
    require(segment_ids[i] == 0 || segment_ids[i] == 1, "batch: segment ids must be 0 or 1");
    require(attention_mask[i] == 0 || attention_mask[i] == 1,
            "batch: attention mask must be 0 or 1");
  }
  const bool has_mlm = !mlm_targets.empty();
  const bool has_nsp = !nsp_labels.empty();
  const bool has_cls = !class_labels.empty();
  if (mode == Mode::kPretrain) {
    require(!has_cls, "batch: class labels present in pretrain mode");
    require(has_mlm, "batch: pretrain mode requires mlm_targets");
    require(mlm_targets.size() == n, "batch: mlm_targets must be batch_size x seq_len");
    for (std::size_t i = 0; i < n; ++i) {
      require(mlm_targets[i] >= -1 && mlm_targets[i] < config.vocab_size,
              "batch: mlm target out of range");
      if (mlm_targets[i] >= 0) {
        require(attention_mask[i] == 1, "batch: masked position must have attention_mask 1");
      }
    }
    if (has_nsp) {
      require(nsp_labels.size() == static_cast<std::size_t>(batch_size),
              "batch: nsp_labels must have batch_size entries");
      for (const auto v : nsp_labels) require(v == 0 || v == 1, "batch: nsp labels must be 0 or 1");
    }
  } else {
    require(!has_nsp, "batch: nsp labels present in classify mode");
    if (has_mlm) {
      for (const auto t : mlm_targets) {
        require(t == -1, "batch: mlm targets present in classify mode");
      }
    }
    require(has_cls, "batch: classify mode requires class_labels");
    require(class_labels.size() == static_cast<std::size_t>(batch_size),
            "batch: class_labels must have batch_size entries");
    for (const auto v : class_labels) {
      require(v >= 0 && v < kNumClasses, "batch: class label out of range");
    }
  }
}

Batch Batch::slice(int begin, int count) const {
  require(begin >= 0 && count > 0 && begin + count <= batch_size, "batch: invalid slice");
  Batch out;
  out.batch_size = count;
  out.seq_len = seq_len;
  const std::size_t from = static_cast<std::size_t>(begin) * seq_len;
  const std::size_t len = static_cast<std::size_t>(count) * seq_len;
  const auto copy_rows = [&](const std::vector<std::int32_t>& src) {
    return src.empty() ? std::vector<std::int32_t>()
                       : std::vector<std::int32_t>(src.begin() + from, src.begin() + from + len);
  };
  out.token_ids = copy_rows(token_ids);
  out.segment_ids = copy_rows(segment_ids);
  out.attention_mask = copy_rows(attention_mask);
  out.mlm_targets = copy_rows(mlm_targets);
  if (!nsp_labels.empty()) {
    out.nsp_labels.assign(nsp_labels.begin() + begin, nsp_labels.begin() + begin + count);
  }
  if (!class_labels.empty()) {
    out.class_labels.assign(class_labels.begin() + begin, class_labels.begin() + begin + count);
  }
  return out;
}

template <typename T>
void Workspace<T>::prepare(const ModelConfig& config, int b) {
  const int L = config.max_seq_len;
  const int D = config.hidden_dim;
  const int H = config.num_heads;
  const int F = config.ff_dim;
  batch_size = b;
  seq_len = L;
  const std::size_t bld = static_cast<std::size_t>(b) * L * D;
  const std::size_t blf = static_cast<std::size_t>(b) * L * F;
  const std::size_t bl = static_cast<std::size_t>(b) * L;
  x0.resize(bld);
  x1.resize(bld);
  ln_e_mean.resize(bl);
  ln_e_inv.resize(bl);
  layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& lb : layers) {
    lb.q.resize(bld);
    lb.k.resize(bld);
    lb.v.resize(bld);
    lb.probs.resize(static_cast<std::size_t>(b) * H * L * L);
    lb.z.resize(bld);
    lb.attn_out.resize(bld);
    lb.r1.resize(bld);
    lb.x2.resize(bld);
    lb.u.resize(blf);
    lb.g.resize(blf);
    lb.ffn_out.resize(bld);
    lb.r2.resize(bld);
    lb.x_out.resize(bld);
    lb.ln1_mean.resize(bl);
    lb.ln1_inv.resize(bl);
    lb.ln2_mean.resize(bl);
    lb.ln2_inv.resize(bl);
  }
  pooled.resize(static_cast<std::size_t>(b) * D);
  nsp_probs.resize(static_cast<std::size_t>(b) * kNumClasses);
  cls_probs.resize(static_cast<std::size_t>(b) * kNumClasses);
  dx.resize(bld);
  dq.resize(bld);
  dk.resize(bld);
  dv.resize(bld);
  dz.resize(bld);
  dscores.resize(static_cast<std::size_t>(L) * L);
  dprobs.resize(static_cast<std::size_t>(L) * L);
  du.resize(blf);
  dg.resize(blf);
  dpooled.resize(static_cast<std::size_t>(b) * D);
  dhead.resize(static_cast<std::size_t>(b) * kNumClasses);
}

namespace {

template <typename T>
struct ForwardState {
  Layout lo;
  bool dropout = false;
  bool want_pooled = false;
};

// Runs the full forward pass, filling the workspace and the output.
template <typename T>
ForwardOutput<T> run_forward(const ModelConfig& config, std::span<const T> params,
                             const Batch& batch, Mode mode,
                             std::optional<std::uint64_t> dropout_seed, Workspace<T>& ws,
                             ForwardState<T>& st) {
  config.validate();
  batch.validate(config, mode);
  st.lo = Layout::build(config);
  const Layout& lo = st.lo;
  require(params.size() == lo.total, "forward: parameter vector has the wrong length");

  const int B = batch.batch_size;
  const int L = config.max_seq_len;  // workspace rows are padded to max_seq_len
  const int bl_in = batch.seq_len;
  const int D = lo.D;
  const int H = lo.H;
  const int F = lo.F;
  const int V = lo.V;
  const int Dh = lo.Dh;
  require(bl_in == L, "forward: batches must be packed to max_seq_len");

  ws.prepare(config, B);
  const std::size_t rows = static_cast<std::size_t>(B) * L;
  const T* p = params.data();

  st.dropout = dropout_seed.has_value() && config.dropout_rate > 0.0;
  const double rate = config.dropout_rate;

  // ---- embeddings ----
  for (int b = 0; b < B; ++b) {
    for (int l = 0; l < L; ++l) {
      const std::size_t row = static_cast<std::size_t>(b) * L + l;
      const std::int32_t tok = batch.token_ids[row];
      const std::int32_t seg = batch.segment_ids[row];
      T* out = ws.x0.data() + row * D;
      const T* te = p + lo.tok_emb + static_cast<std::size_t>(tok) * D;
      const T* pe = p + lo.pos_emb + static_cast<std::size_t>(l) * D;
      const T* se = p + lo.seg_emb + static_cast<std::size_t>(seg) * D;
      for (int j = 0; j < D; ++j) out[j] = te[j] + pe[j] + se[j];
    }
  }
  layer_norm_forward(ws.x0.data(), p + lo.emb_gain, p + lo.emb_bias, ws.x1.data(),
                     ws.ln_e_mean.data(), ws.ln_e_inv.data(), rows, D);
  if (st.dropout) {
    fill_dropout_mask(ws.drop_emb, rows * D, rate, *dropout_seed, 0);
    kern::hadamard(ws.x1.data(), ws.x1.data(), ws.drop_emb.data(), rows * D);
  }

  const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(Dh)));

  // ---- encoder layers ----
  const T* x_in = ws.x1.data();
  for (int layer = 0; layer < config.num_layers; ++layer) {
    auto& lb = ws.layers[static_cast<std::size_t>(layer)];
    const auto& lp = lo.layers[static_cast<std::size_t>(layer)];

    kern::matmul_nn(lb.q.data(), D, x_in, D, p + lp.wq, D, rows, D, D, false);
    add_bias(lb.q.data(), rows, p + lp.bq, D);
    kern::matmul_nn(lb.k.data(), D, x_in, D, p + lp.wk, D, rows, D, D, false);
    add_bias(lb.k.data(), rows, p + lp.bk, D);
    kern::matmul_nn(lb.v.data(), D, x_in, D, p + lp.wv, D, rows, D, D, false);
    add_bias(lb.v.data(), rows, p + lp.bv, D);

    T* scores = ws.dscores.data();  // scratch, L x L
    for (int b = 0; b < B; ++b) {
      const std::int32_t* amask = batch.attention_mask.data() + static_cast<std::size_t>(b) * L;
      for (int h = 0; h < H; ++h) {
        const std::size_t head_off = static_cast<std::size_t>(b) * L * D + h * Dh;
        kern::matmul_nt(scores, static_cast<std::size_t>(L), lb.q.data() + head_off, D,
                        lb.k.data() + head_off, D, static_cast<std::size_t>(L),
                        static_cast<std::size_t>(Dh), static_cast<std::size_t>(L), false);
        T* probs = lb.probs.data() + (static_cast<std::size_t>(b) * H + h) * L * L;
        for (int i = 0; i < L; ++i) {
          T* srow = scores + static_cast<std::size_t>(i) * L;
          T max_score = static_cast<T>(-std::numeric_limits<double>::infinity());
          for (int j = 0; j < L; ++j) {
            const T s = amask[j] == 1 ? srow[j] * inv_sqrt_dh : static_cast<T>(kMaskScore);
            srow[j] = s;
            max_score = std::max(max_score, s);
          }
          T* prow = probs + static_cast<std::size_t>(i) * L;
          kern::exp_shift(prow, srow, -max_score, static_cast<std::size_t>(L));
          double denom = 0.0;
          for (int j = 0; j < L; ++j) denom += static_cast<double>(prow[j]);
          kern::scale(prow, static_cast<T>(1.0 / denom), static_cast<std::size_t>(L));
        }
        kern::matmul_nn(lb.z.data() + head_off, D, probs, static_cast<std::size_t>(L),
                        lb.v.data() + head_off, D, static_cast<std::size_t>(L),
                        static_cast<std::size_t>(L), static_cast<std::size_t>(Dh), false);
      }
    }

    kern::matmul_nn(lb.attn_out.data(), D, lb.z.data(), D, p + lp.wo, D, rows, D, D, false);
    add_bias(lb.attn_out.data(), rows, p + lp.bo, D);
    if (st.dropout) {
      fill_dropout_mask(lb.drop_attn, rows * D, rate, *dropout_seed, 1 + 2 * layer);
      kern::hadamard(lb.attn_out.data(), lb.attn_out.data(), lb.drop_attn.data(), rows * D);
    }
    kern::add(lb.r1.data(), x_in, lb.attn_out.data(), rows * D);
    layer_norm_forward(lb.r1.data(), p + lp.ln1_gain, p + lp.ln1_bias, lb.x2.data(),
                       lb.ln1_mean.data(), lb.ln1_inv.data(), rows, D);

    kern::matmul_nn(lb.u.data(), F, lb.x2.data(), D, p + lp.w1, F, rows, D, F, false);
    add_bias(lb.u.data(), rows, p + lp.b1, F);
    for (std::size_t i = 0; i < rows * static_cast<std::size_t>(F); ++i) {
      lb.g[i] = gelu(lb.u[i]);
    }
    kern::matmul_nn(lb.ffn_out.data(), D, lb.g.data(), F, p + lp.w2, D, rows, F, D, false);
    add_bias(lb.ffn_out.data(), rows, p + lp.b2, D);
    if (st.dropout) {
      fill_dropout_mask(lb.drop_ffn, rows * D, rate, *dropout_seed, 2 + 2 * layer);
      kern::hadamard(lb.ffn_out.data(), lb.ffn_out.data(), lb.drop_ffn.data(), rows * D);
    }
    kern::add(lb.r2.data(), lb.x2.data(), lb.ffn_out.data(), rows * D);
    layer_norm_forward(lb.r2.data(), p + lp.ln2_gain, p + lp.ln2_bias, lb.x_out.data(),
                       lb.ln2_mean.data(), lb.ln2_inv.data(), rows, D);
    x_in = lb.x_out.data();
  }
  const T* x_final = x_in;

  // ---- heads & losses ----
  ForwardOutput<T> out;
  out.losses.assign(static_cast<std::size_t>(B), T(0));
  out.mlm_losses.assign(static_cast<std::size_t>(B), T(0));
  out.masked_counts.assign(static_cast<std::size_t>(B), 0);

  const bool pretrain = mode == Mode::kPretrain;
  const bool has_nsp = pretrain && !batch.nsp_labels.empty();
  st.want_pooled = has_nsp || !pretrain;

  if (pretrain) {
    ws.masked_example.clear();
    ws.masked_position.clear();
    ws.masked_target.clear();
    for (int b = 0; b < B; ++b) {
      for (int l = 0; l < L; ++l) {
        const std::int32_t t = batch.mlm_targets[static_cast<std::size_t>(b) * L + l];
        if (t >= 0) {
          ws.masked_example.push_back(b);
          ws.masked_position.push_back(l);
          ws.masked_target.push_back(t);
          ++out.masked_counts[static_cast<std::size_t>(b)];
        }
      }
    }
    const std::size_t nm = ws.masked_example.size();
    ws.mlm_hidden.resize(nm * D);
    ws.mlm_probs.resize(nm * V);
    ws.dmlm_hidden.resize(nm * D);
    for (std::size_t i = 0; i < nm; ++i) {
      const std::size_t row =
          static_cast<std::size_t>(ws.masked_example[i]) * L + ws.masked_position[i];
      std::memcpy(ws.mlm_hidden.data() + i * D, x_final + row * D, sizeof(T) * D);
    }
    if (nm > 0) {
      kern::matmul_nn(ws.mlm_probs.data(), static_cast<std::size_t>(V), ws.mlm_hidden.data(), D,
                      p + lo.mlm_w, static_cast<std::size_t>(V), nm, D,
                      static_cast<std::size_t>(V), false);
      add_bias(ws.mlm_probs.data(), nm, p + lo.mlm_b, V);
    }
    out.mlm_predictions.resize(nm);
    out.mlm_targets.assign(ws.masked_target.begin(), ws.masked_target.end());
    for (std::size_t i = 0; i < nm; ++i) {
      T* logits = ws.mlm_probs.data() + i * V;
      int argmax = 0;
      T best = logits[0];
      for (int j = 1; j < V; ++j) {
        if (logits[j] > best) {
          best = logits[j];
          argmax = j;
        }
      }
      out.mlm_predictions[i] = argmax;
      const T target_logit = logits[ws.masked_target[i]];
      // logits -> probs in place; one exp pass feeds both the normalizer and
      // the backward pass
      kern::exp_shift(logits, logits, -best, static_cast<std::size_t>(V));
      double denom = 0.0;
      for (int j = 0; j < V; ++j) denom += static_cast<double>(logits[j]);
      const double lse = static_cast<double>(best) + std::log(denom);
      const double loss = lse - static_cast<double>(target_logit);
      out.mlm_losses[static_cast<std::size_t>(ws.masked_example[i])] += static_cast<T>(loss);
      kern::scale(logits, static_cast<T>(1.0 / denom), static_cast<std::size_t>(V));
    }
    for (int b = 0; b < B; ++b) {
      if (out.masked_counts[static_cast<std::size_t>(b)] > 0) {
        out.mlm_losses[static_cast<std::size_t>(b)] /=
            static_cast<T>(out.masked_counts[static_cast<std::size_t>(b)]);
      }
      out.losses[static_cast<std::size_t>(b)] = out.mlm_losses[static_cast<std::size_t>(b)];
    }
  }

  if (st.want_pooled) {
    // pooled = tanh(x_final[CLS] * Wp + bp); CLS rows are strided by L*D.
    kern::matmul_nn(ws.pooled.data(), D, x_final, static_cast<std::size_t>(L) * D, p + lo.pooler_w,
                    D, static_cast<std::size_t>(B), D, D, false);
    add_bias(ws.pooled.data(), static_cast<std::size_t>(B), p + lo.pooler_b, D);
    for (std::size_t i = 0; i < static_cast<std::size_t>(B) * D; ++i) {
      ws.pooled[i] = std::tanh(ws.pooled[i]);
    }
  }

  const auto two_way_head = [&](std::size_t w_off, std::size_t b_off,
                                const std::vector<std::int32_t>& labels, std::vector<T>& probs,
                                std::vector<T>& logits_out) {
    kern::matmul_nn(probs.data(), kNumClasses, ws.pooled.data(), D, p + w_off, kNumClasses,
                    static_cast<std::size_t>(B), D, kNumClasses, false);
    add_bias(probs.data(), static_cast<std::size_t>(B), p + b_off, kNumClasses);
    logits_out.assign(probs.begin(), probs.begin() + static_cast<std::size_t>(B) * kNumClasses);
    for (int b = 0; b < B; ++b) {
      T* row = probs.data() + static_cast<std::size_t>(b) * kNumClasses;
      const T m = std::max(row[0], row[1]);
      const double denom =
          std::exp(static_cast<double>(row[0] - m)) + std::exp(static_cast<double>(row[1] - m));
      const double lse = static_cast<double>(m) + std::log(denom);
      const double loss = lse - static_cast<double>(row[labels[static_cast<std::size_t>(b)]]);
      out.losses[static_cast<std::size_t>(b)] += static_cast<T>(loss);
      const T inv = static_cast<T>(1.0 / denom);
      row[0] = std::exp(row[0] - m) * inv;
      row[1] = std::exp(row[1] - m) * inv;
    }
  };

  if (has_nsp) {
    two_way_head(lo.nsp_w, lo.nsp_b, batch.nsp_labels, ws.nsp_probs, out.nsp_logits);
  } else if (!pretrain) {
    two_way_head(lo.cls_w, lo.cls_b, batch.class_labels, ws.cls_probs, out.cls_logits);
  }
  return out;
}

// Reverse pass. Requires a workspace filled by run_forward with the same
// arguments. Gradient storage behind `sink` must be zero-initialised.
template <typename T, typename Sink>
void run_backward(const ModelConfig& config, std::span<const T> params, const Batch& batch,
                  Mode mode, Workspace<T>& ws, const ForwardState<T>& st, const Sink& sink) {
  const Layout& lo = st.lo;
  const int B = batch.batch_size;
  const int L = config.max_seq_len;
  const int D = lo.D;
  const int H = lo.H;
  const int F = lo.F;
  const int V = lo.V;
  const int Dh = lo.Dh;
  const std::size_t rows = static_cast<std::size_t>(B) * L;
  const T* p = params.data();
  const bool pretrain = mode == Mode::kPretrain;
  const bool has_nsp = pretrain && !batch.nsp_labels.empty();

  T* dx = ws.dx.data();
  kern::fill(dx, rows * static_cast<std::size_t>(D), T(0));
  const T* x_final =
      config.num_layers > 0 ? ws.layers.back().x_out.data() : ws.x1.data();

  // ---- MLM head ----
  if (pretrain && !ws.masked_example.empty()) {
    const std::size_t nm = ws.masked_example.size();
    // Masked rows are grouped by example; each range turns its softmax probs
    // into scaled (probs - onehot) logit gradients, then accumulates weight
    // and bias grads.
    std::size_t start = 0;
    while (start < nm) {
      const int b = ws.masked_example[start];
      std::size_t end = start;
      while (end < nm && ws.masked_example[end] == b) ++end;
      const T w = sink.scale(b) / static_cast<T>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        T* row = ws.mlm_probs.data() + i * V;
        kern::scale(row, w, static_cast<std::size_t>(V));
        row[ws.masked_target[i]] -= w;
      }
      if constexpr (Sink::kPerExample) {
        tn_into(sink.slot(b, lo.mlm_w), ws.mlm_hidden.data() + start * D,
                static_cast<std::size_t>(D), ws.mlm_probs.data() + start * V,
                static_cast<std::size_t>(V), end - start, static_cast<std::size_t>(D),
                static_cast<std::size_t>(V));
      }
      auto* db = sink.slot(b, lo.mlm_b);
      for (std::size_t r = start; r < end; ++r) {
        accum_into(db, ws.mlm_probs.data() + r * V, static_cast<std::size_t>(V));
      }
      start = end;
    }
    if constexpr (!Sink::kPerExample) {
      tn_into(sink.slot(0, lo.mlm_w), ws.mlm_hidden.data(), static_cast<std::size_t>(D),
              ws.mlm_probs.data(), static_cast<std::size_t>(V), nm, static_cast<std::size_t>(D),
              static_cast<std::size_t>(V));
    }
    kern::matmul_nt(ws.dmlm_hidden.data(), D, ws.mlm_probs.data(), static_cast<std::size_t>(V),
                    p + lo.mlm_w, static_cast<std::size_t>(V), nm, static_cast<std::size_t>(V),
                    D, false);
    for (std::size_t i = 0; i < nm; ++i) {
      const std::size_t row =
          static_cast<std::size_t>(ws.masked_example[i]) * L + ws.masked_position[i];
      kern::axpy(dx + row * D, ws.dmlm_hidden.data() + i * D, T(1), D);
    }
  }

  // ---- NSP / classifier + pooler ----
  if (st.want_pooled) {
    const std::vector<std::int32_t>& labels = has_nsp ? batch.nsp_labels : batch.class_labels;
    std::vector<T>& probs = has_nsp ? ws.nsp_probs : ws.cls_probs;
    const std::size_t w_off = has_nsp ? lo.nsp_w : lo.cls_w;
    const std::size_t b_off = has_nsp ? lo.nsp_b : lo.cls_b;
    T* dlog = ws.dhead.data();
    for (int b = 0; b < B; ++b) {
      const T w = sink.scale(b);
      const T* prow = probs.data() + static_cast<std::size_t>(b) * kNumClasses;
      T* drow = dlog + static_cast<std::size_t>(b) * kNumClasses;
      for (int c = 0; c < kNumClasses; ++c) drow[c] = prow[c] * w;
      drow[labels[static_cast<std::size_t>(b)]] -= w;
    }
    weight_grad(sink, w_off, ws.pooled.data(), static_cast<std::size_t>(D), dlog,
                static_cast<std::size_t>(kNumClasses), B, 1, static_cast<std::size_t>(D),
                static_cast<std::size_t>(kNumClasses));
    bias_grad(sink, b_off, dlog, static_cast<std::size_t>(kNumClasses), B, 1,
              static_cast<std::size_t>(kNumClasses));
    kern::matmul_nt(ws.dpooled.data(), D, dlog, static_cast<std::size_t>(kNumClasses), p + w_off,
                    static_cast<std::size_t>(kNumClasses), static_cast<std::size_t>(B),
                    static_cast<std::size_t>(kNumClasses), D, false);
    // tanh backward in place
    for (std::size_t i = 0; i < static_cast<std::size_t>(B) * D; ++i) {
      ws.dpooled[i] *= (T(1) - ws.pooled[i] * ws.pooled[i]);
    }
    weight_grad(sink, lo.pooler_w, x_final, static_cast<std::size_t>(L) * D, ws.dpooled.data(),
                static_cast<std::size_t>(D), B, 1, static_cast<std::size_t>(D),
                static_cast<std::size_t>(D));
    bias_grad(sink, lo.pooler_b, ws.dpooled.data(), static_cast<std::size_t>(D), B, 1,
              static_cast<std::size_t>(D));
    // reuse dmlm_hidden-sized scratch for the CLS-row gradient
    ws.dmlm_hidden.resize(static_cast<std::size_t>(B) * D);
    kern::matmul_nt(ws.dmlm_hidden.data(), D, ws.dpooled.data(), D, p + lo.pooler_w, D,
                    static_cast<std::size_t>(B), D, D, false);
    for (int b = 0; b < B; ++b) {
      kern::axpy(dx + static_cast<std::size_t>(b) * L * D, ws.dmlm_hidden.data() + static_cast<std::size_t>(b) * D,
                 T(1), D);
    }
  }

  const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(Dh)));

  // ---- encoder layers, in reverse ----
  for (int layer = config.num_layers - 1; layer >= 0; --layer) {
    auto& lb = ws.layers[static_cast<std::size_t>(layer)];
    const auto& lp = lo.layers[static_cast<std::size_t>(layer)];
    const T* x_in = layer == 0 ? ws.x1.data() : ws.layers[static_cast<std::size_t>(layer) - 1].x_out.data();

    // LN after FFN: dx currently holds d(x_out); becomes d(r2) in place.
    layer_norm_backward(sink, lp.ln2_gain, lp.ln2_bias, p + lp.ln2_gain, lb.r2.data(),
                        lb.ln2_mean.data(), lb.ln2_inv.data(), dx, B, L, D);

    // FFN branch. d(ffn_out raw) = dr2 (times dropout mask when active).
    const T* dffn = dx;
    if (st.dropout) {
      kern::hadamard(ws.dz.data(), dx, lb.drop_ffn.data(), rows * static_cast<std::size_t>(D));
      dffn = ws.dz.data();
    }
    kern::matmul_nt(ws.dg.data(), F, dffn, D, p + lp.w2, D, rows, D, static_cast<std::size_t>(F),
                    false);
    weight_grad(sink, lp.w2, lb.g.data(), static_cast<std::size_t>(F), dffn,
                static_cast<std::size_t>(D), B, L, static_cast<std::size_t>(F),
                static_cast<std::size_t>(D));
    bias_grad(sink, lp.b2, dffn, static_cast<std::size_t>(D), B, L, static_cast<std::size_t>(D));
    for (std::size_t i = 0; i < rows * static_cast<std::size_t>(F); ++i) {
      ws.du[i] = ws.dg[i] * gelu_grad(lb.u[i]);
    }
    weight_grad(sink, lp.w1, lb.x2.data(), static_cast<std::size_t>(D), ws.du.data(),
                static_cast<std::size_t>(F), B, L, static_cast<std::size_t>(D),
                static_cast<std::size_t>(F));
    bias_grad(sink, lp.b1, ws.du.data(), static_cast<std::size_t>(F), B, L,
              static_cast<std::size_t>(F));
    // dx (= dr2 residual) += du * W1^T  -> d(x2)
    kern::matmul_nt(dx, D, ws.du.data(), F, p + lp.w1, F, rows, static_cast<std::size_t>(F), D,
                    true);

    // LN after attention: dx = d(x2) -> d(r1) in place.
    layer_norm_backward(sink, lp.ln1_gain, lp.ln1_bias, p + lp.ln1_gain, lb.r1.data(),
                        lb.ln1_mean.data(), lb.ln1_inv.data(), dx, B, L, D);

    const T* dattn = dx;
    if (st.dropout) {
      kern::hadamard(ws.dz.data(), dx, lb.drop_attn.data(), rows * static_cast<std::size_t>(D));
      dattn = ws.dz.data();
    }
    weight_grad(sink, lp.wo, lb.z.data(), static_cast<std::size_t>(D), dattn,
                static_cast<std::size_t>(D), B, L, static_cast<std::size_t>(D),
                static_cast<std::size_t>(D));
    bias_grad(sink, lp.bo, dattn, static_cast<std::size_t>(D), B, L, static_cast<std::size_t>(D));
    kern::matmul_nt(ws.dq.data(), D, dattn, D, p + lp.wo, D, rows, D, D, false);
    // ws.dq temporarily holds dZ; move it so dq can be reused per head.
    std::swap(ws.dq, ws.dz);
    const T* dz_all = ws.dz.data();

    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const std::size_t head_off = static_cast<std::size_t>(b) * L * D + h * Dh;
        const T* probs = lb.probs.data() + (static_cast<std::size_t>(b) * H + h) * L * L;
        // dP = dZ_h * V_h^T
        kern::matmul_nt(ws.dprobs.data(), static_cast<std::size_t>(L), dz_all + head_off, D,
                        lb.v.data() + head_off, D, static_cast<std::size_t>(L),
                        static_cast<std::size_t>(Dh), static_cast<std::size_t>(L), false);
        // dV_h = P^T * dZ_h
        kern::matmul_tn(ws.dv.data() + head_off, D, probs, static_cast<std::size_t>(L),
                        dz_all + head_off, D, static_cast<std::size_t>(L),
                        static_cast<std::size_t>(L), static_cast<std::size_t>(Dh), false);
        // softmax backward, then undo the 1/sqrt(Dh) score scaling
        for (int i = 0; i < L; ++i) {
          const T* prow = probs + static_cast<std::size_t>(i) * L;
          const T* dprow = ws.dprobs.data() + static_cast<std::size_t>(i) * L;
          T* dsrow = ws.dscores.data() + static_cast<std::size_t>(i) * L;
          double t = 0.0;
          for (int j = 0; j < L; ++j) t += static_cast<double>(dprow[j]) * prow[j];
          const T tt = static_cast<T>(t);
          for (int j = 0; j < L; ++j) dsrow[j] = prow[j] * (dprow[j] - tt) * inv_sqrt_dh;
        }
        // dQ_h = dS * K_h ; dK_h = dS^T * Q_h
        kern::matmul_nn(ws.dq.data() + head_off, D, ws.dscores.data(),
                        static_cast<std::size_t>(L), lb.k.data() + head_off, D,
                        static_cast<std::size_t>(L), static_cast<std::size_t>(L),
                        static_cast<std::size_t>(Dh), false);
        kern::matmul_tn(ws.dk.data() + head_off, D, ws.dscores.data(),
                        static_cast<std::size_t>(L), lb.q.data() + head_off, D,
                        static_cast<std::size_t>(L), static_cast<std::size_t>(L),
                        static_cast<std::size_t>(Dh), false);
      }
    }

    weight_grad(sink, lp.wq, x_in, static_cast<std::size_t>(D), ws.dq.data(),
                static_cast<std::size_t>(D), B, L, static_cast<std::size_t>(D),
                static_cast<std::size_t>(D));
    bias_grad(sink, lp.bq, ws.dq.data(), static_cast<std::size_t>(D), B, L,
              static_cast<std::size_t>(D));
    weight_grad(sink, lp.wk, x_in, static_cast<std::size_t>(D), ws.dk.data(),
                static_cast<std::size_t>(D), B, L, static_cast<std::size_t>(D),
                static_cast<std::size_t>(D));
    bias_grad(sink, lp.bk, ws.dk.data(), static_cast<std::size_t>(D), B, L,
              static_cast<std::size_t>(D));
    weight_grad(sink, lp.wv, x_in, static_cast<std::size_t>(D), ws.dv.data(),
                static_cast<std::size_t>(D), B, L, static_cast<std::size_t>(D),
                static_cast<std::size_t>(D));
    bias_grad(sink, lp.bv, ws.dv.data(), static_cast<std::size_t>(D), B, L,
              static_cast<std::size_t>(D));

    // dx (= dr1 residual) += dQ Wq^T + dK Wk^T + dV Wv^T  -> d(x_in)
    kern::matmul_nt(dx, D, ws.dq.data(), D, p + lp.wq, D, rows, D, D, true);
    kern::matmul_nt(dx, D, ws.dk.data(), D, p + lp.wk, D, rows, D, D, true);
    kern::matmul_nt(dx, D, ws.dv.data(), D, p + lp.wv, D, rows, D, D, true);
  }

  // ---- embeddings ----
  if (st.dropout) {
    kern::hadamard(dx, dx, ws.drop_emb.data(), rows * static_cast<std::size_t>(D));
  }
  layer_norm_backward(sink, lo.emb_gain, lo.emb_bias, p + lo.emb_gain, ws.x0.data(),
                      ws.ln_e_mean.data(), ws.ln_e_inv.data(), dx, B, L, D);
  for (int b = 0; b < B; ++b) {
    for (int l = 0; l < L; ++l) {
      const std::size_t row = static_cast<std::size_t>(b) * L + l;
      const std::int32_t tok = batch.token_ids[row];
      const std::int32_t seg = batch.segment_ids[row];
      const T* drow = dx + row * D;
      accum_into(sink.slot(b, lo.tok_emb) + static_cast<std::size_t>(tok) * D, drow,
                 static_cast<std::size_t>(D));
      accum_into(sink.slot(b, lo.pos_emb) + static_cast<std::size_t>(l) * D, drow,
                 static_cast<std::size_t>(D));
      accum_into(sink.slot(b, lo.seg_emb) + static_cast<std::size_t>(seg) * D, drow,
                 static_cast<std::size_t>(D));
    }
  }
}

}  // namespace

template <typename T>
ForwardOutput<T> forward(const ModelConfig& config, std::span<const T> params, const Batch& batch,
                         Mode mode, std::optional<std::uint64_t> dropout_seed, Workspace<T>& ws) {
  ForwardState<T> st;
  return run_forward(config, params, batch, mode, dropout_seed, ws, st);
}

template <typename T>
ForwardOutput<T> batch_gradient(const ModelConfig& config, std::span<const T> params,
                                const Batch& batch, Mode mode,
                                std::optional<std::uint64_t> dropout_seed, Workspace<T>& ws,
                                std::span<T> grad) {
  ForwardState<T> st;
  auto out = run_forward(config, params, batch, mode, dropout_seed, ws, st);
  require(grad.size() == params.size(), "batch_gradient: grad has the wrong length");
  ws.grad_acc.assign(params.size(), 0.0);
  BatchSink<T> sink{ws.grad_acc.data(), T(1) / static_cast<T>(batch.batch_size)};
  run_backward(config, params, batch, mode, ws, st, sink);
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = static_cast<T>(ws.grad_acc[i]);
  return out;
}

namespace {

// Rows per execution tile. With one worker the batch is blocked so the hot
// activation set stays inside a typical L2; with several workers the full
// batch is kept so the row-parallel matmuls have work to split. Tiling never
// changes results: every per-example quantity is a fixed function of that
// example alone.
template <typename T>
int tile_rows(const ModelConfig& c, int batch) {
  if (worker_threads() > 1) return batch;
  const std::size_t ld = static_cast<std::size_t>(c.max_seq_len) * c.hidden_dim;
  const std::size_t lf = static_cast<std::size_t>(c.max_seq_len) * c.ff_dim;
  const std::size_t att =
      static_cast<std::size_t>(c.num_heads) * c.max_seq_len * c.max_seq_len;
  const std::size_t per_example =
      sizeof(T) *
      (7 * ld + 4 * lf + static_cast<std::size_t>(c.num_layers) * (10 * ld + 2 * lf + att));
  constexpr std::size_t kBudget = std::size_t{1} << 20;
  const std::size_t tile = std::max<std::size_t>(1, kBudget / std::max<std::size_t>(per_example, 1));
  return static_cast<int>(std::min<std::size_t>(tile, static_cast<std::size_t>(batch)));
}

template <typename T>
void append_output(ForwardOutput<T>& into, ForwardOutput<T>&& part) {
  const auto append = [](auto& dst, const auto& src) {
    dst.insert(dst.end(), src.begin(), src.end());
  };
  append(into.losses, part.losses);
  append(into.mlm_losses, part.mlm_losses);
  append(into.masked_counts, part.masked_counts);
  append(into.mlm_predictions, part.mlm_predictions);
  append(into.mlm_targets, part.mlm_targets);
  append(into.nsp_logits, part.nsp_logits);
  append(into.cls_logits, part.cls_logits);
}

}  // namespace

template <typename T>
ForwardOutput<T> per_sample_gradients(const ModelConfig& config, std::span<const T> params,
                                      const Batch& batch, Mode mode,
                                      std::optional<std::uint64_t> dropout_seed, Workspace<T>& ws,
                                      PerSampleGrads<T>& out_grads) {
  const int tile = tile_rows<T>(config, batch.batch_size);
  if (tile >= batch.batch_size) {
    ForwardState<T> st;
    auto out = run_forward(config, params, batch, mode, dropout_seed, ws, st);
    out_grads.reset(batch.batch_size, params.size());
    PerSampleSink<T> sink{&out_grads, 0};
    run_backward(config, params, batch, mode, ws, st, sink);
    return out;
  }

  batch.validate(config, mode);
  out_grads.batch_size = batch.batch_size;
  out_grads.param_count = params.size();
  out_grads.rows.resize(static_cast<std::size_t>(batch.batch_size) * params.size());
  ForwardOutput<T> merged;
  // Rows are accumulated in a tile-local staging buffer (which stays in
  // cache through the backward's scattered writes) and streamed out once.
  ws.staging_grads.param_count = params.size();
  ws.staging_grads.batch_size = tile;
  ws.staging_grads.rows.resize(static_cast<std::size_t>(tile) * params.size());
  for (int base = 0; base < batch.batch_size; base += tile) {
    const int count = std::min(tile, batch.batch_size - base);
    const Batch sub = batch.slice(base, count);
    for (int b = 0; b < count; ++b) {
      kern::fill(ws.staging_grads.row(b), params.size(), T(0));
    }
    ForwardState<T> st;
    auto part = run_forward(config, params, sub, mode, dropout_seed, ws, st);
    PerSampleSink<T> sink{&ws.staging_grads, 0};
    run_backward(config, params, sub, mode, ws, st, sink);
    for (int b = 0; b < count; ++b) {
      kern::copy_stream(out_grads.row(base + b), ws.staging_grads.row(b), params.size());
    }
    append_output(merged, std::move(part));
  }
  return merged;
}

template <typename T>
ForwardOutput<T> forward(const ModelConfig& config, std::span<const T> params, const Batch& batch,
                         Mode mode, std::optional<std::uint64_t> dropout_seed) {
  Workspace<T> ws;
  return forward(config, params, batch, mode, dropout_seed, ws);
}

template <typename T>
ForwardOutput<T> batch_gradient(const ModelConfig& config, std::span<const T> params,
                                const Batch& batch, Mode mode, std::span<T> grad) {
  Workspace<T> ws;
  return batch_gradient(config, params, batch, mode, std::nullopt, ws, grad);
}

template <typename T>
ForwardOutput<T> per_sample_gradients(const ModelConfig& config, std::span<const T> params,
                                      const Batch& batch, Mode mode, PerSampleGrads<T>& out) {
  Workspace<T> ws;
  return per_sample_gradients(config, params, batch, mode, std::nullopt, ws, out);
}

#define DPGE_MODEL_INSTANTIATE(T)                                                                 \
  template struct Workspace<T>;                                                                   \
  template ForwardOutput<T> forward<T>(const ModelConfig&, std::span<const T>, const Batch&,      \
                                       Mode, std::optional<std::uint64_t>, Workspace<T>&);        \
  template ForwardOutput<T> batch_gradient<T>(const ModelConfig&, std::span<const T>,             \
                                              const Batch&, Mode, std::optional<std::uint64_t>,   \
                                              Workspace<T>&, std::span<T>);                       \
  template ForwardOutput<T> per_sample_gradients<T>(const ModelConfig&, std::span<const T>,       \
                                                    const Batch&, Mode,                           \
                                                    std::optional<std::uint64_t>, Workspace<T>&,  \
                                                    PerSampleGrads<T>&);                          \
  template ForwardOutput<T> forward<T>(const ModelConfig&, std::span<const T>, const Batch&,      \
                                       Mode, std::optional<std::uint64_t>);                       \
  template ForwardOutput<T> batch_gradient<T>(const ModelConfig&, std::span<const T>,             \
                                              const Batch&, Mode, std::span<T>);                  \
  template ForwardOutput<T> per_sample_gradients<T>(const ModelConfig&, std::span<const T>,       \
                                                    const Batch&, Mode, PerSampleGrads<T>&)

DPGE_MODEL_INSTANTIATE(float);
DPGE_MODEL_INSTANTIATE(double);
#undef DPGE_MODEL_INSTANTIATE

}  // namespace dpge::model
