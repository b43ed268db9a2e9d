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
#include "kernels_avx2.hpp"

#ifdef DPGE_HAVE_AVX2

#include <immintrin.h>

#include <cmath>
#include <cstdint>

// AVX2/FMA kernels. Rows of a matmul are computed独立ently with a fixed
// k-ordered FMA fold, so results do not depend on row tiling; scalar column
// tails use std::fma to match the rounding of the vector lanes.

namespace dpge::kern::avx2 {
namespace {

// Fixed-order horizontal sum: pairs lanes (i, i+4), then reduces the 4
// partial sums as ((s0+s2)+(s1+s3)).
inline float hsum(__m256 v) {
  const __m128 lo = _mm256_castps256_ps128(v);
  const __m128 hi = _mm256_extractf128_ps(v, 1);
  const __m128 s = _mm_add_ps(lo, hi);
  const __m128 shuf = _mm_movehl_ps(s, s);
  const __m128 pair = _mm_add_ps(s, shuf);
  const __m128 swap = _mm_shuffle_ps(pair, pair, 0x1);
  return _mm_cvtss_f32(_mm_add_ss(pair, swap));
}

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  const __m128d swap = _mm_unpackhi_pd(s, s);
  return _mm_cvtsd_f64(_mm_add_sd(s, swap));
}

}  // namespace

void axpy_f32(float* y, const float* x, float alpha, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 vy = _mm256_loadu_ps(y + i);
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), vy));
  }
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

void scale_f32(float* x, float alpha, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(x + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
  }
  for (; i < n; ++i) x[i] *= alpha;
}

void add_f32(float* out, const float* a, const float* b, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void hadamard_f32(float* out, const float* a, const float* b, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

float dot_f32(const float* a, const float* b, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
  }
  float total = hsum(acc);
  for (; i < n; ++i) total = std::fma(a[i], b[i], total);
  return total;
}

double sum_sq_f32(const float* x, std::size_t n) {
  __m256d acc_lo = _mm256_setzero_pd();
  __m256d acc_hi = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256d lo = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
    const __m256d hi = _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1));
    acc_lo = _mm256_fmadd_pd(lo, lo, acc_lo);
    acc_hi = _mm256_fmadd_pd(hi, hi, acc_hi);
  }
  double total = hsum(_mm256_add_pd(acc_lo, acc_hi));
  for (; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    total += v * v;
  }
  return total;
}

void accum_f64_f32(double* acc, const float* x, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256d lo = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
    const __m256d hi = _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1));
    _mm256_storeu_pd(acc + i, _mm256_add_pd(_mm256_loadu_pd(acc + i), lo));
    _mm256_storeu_pd(acc + i + 4, _mm256_add_pd(_mm256_loadu_pd(acc + i + 4), hi));
  }
  for (; i < n; ++i) acc[i] += static_cast<double>(x[i]);
}

namespace {

// expf with Cody-Waite range reduction and the Cephes degree-5 polynomial;
// a few ulp of libm over the live range. Inputs below -87.3 (e.g. additive
// attention-mask scores) come out as exact zeros, like libm underflow.
inline __m256 exp_ps(__m256 x) {
  const __m256 lo = _mm256_set1_ps(-87.33654f);
  const __m256 hi = _mm256_set1_ps(88.72283f);
  const __m256 live = _mm256_cmp_ps(x, lo, _CMP_GE_OQ);
  x = _mm256_max_ps(_mm256_min_ps(x, hi), lo);

  const __m256 log2e = _mm256_set1_ps(1.44269504088896341f);
  const __m256 r =
      _mm256_round_ps(_mm256_mul_ps(x, log2e), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  // f = x - r*ln2, split so the reduction stays accurate for large |x|
  const __m256 ln2_hi = _mm256_set1_ps(0.693359375f);
  const __m256 ln2_lo = _mm256_set1_ps(-2.12194440e-4f);
  __m256 f = _mm256_fnmadd_ps(r, ln2_hi, x);
  f = _mm256_fnmadd_ps(r, ln2_lo, f);

  __m256 y = _mm256_set1_ps(1.9875691500e-4f);
  y = _mm256_fmadd_ps(y, f, _mm256_set1_ps(1.3981999507e-3f));
  y = _mm256_fmadd_ps(y, f, _mm256_set1_ps(8.3334519073e-3f));
  y = _mm256_fmadd_ps(y, f, _mm256_set1_ps(4.1665795894e-2f));
  y = _mm256_fmadd_ps(y, f, _mm256_set1_ps(1.6666665459e-1f));
  y = _mm256_fmadd_ps(y, f, _mm256_set1_ps(5.0000001201e-1f));
  y = _mm256_fmadd_ps(y, _mm256_mul_ps(f, f), f);
  y = _mm256_add_ps(y, _mm256_set1_ps(1.0f));

  // scale by 2^r through the exponent bits
  const __m256i ri = _mm256_cvtps_epi32(r);
  const __m256i biased = _mm256_add_epi32(ri, _mm256_set1_epi32(127));
  const __m256 scale = _mm256_castsi256_ps(_mm256_slli_epi32(biased, 23));
  return _mm256_and_ps(_mm256_mul_ps(y, scale), live);
}

}  // namespace

void exp_shift_f32(float* out, const float* x, float shift, std::size_t n) {
  const __m256 vshift = _mm256_set1_ps(shift);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, exp_ps(_mm256_add_ps(_mm256_loadu_ps(x + i), vshift)));
  }
  for (; i < n; ++i) out[i] = std::exp(x[i] + shift);
}

void copy_stream_f32(float* dst, const float* src, std::size_t n) {
  std::size_t i = 0;
  // head until the destination is 32-byte aligned
  while (i < n && (reinterpret_cast<std::uintptr_t>(dst + i) & 31u) != 0) {
    dst[i] = src[i];
    ++i;
  }
  for (; i + 8 <= n; i += 8) {
    _mm256_stream_ps(dst + i, _mm256_loadu_ps(src + i));
  }
  _mm_sfence();
  for (; i < n; ++i) dst[i] = src[i];
}

namespace {

// 4-row x 16-column register block for matmul_nn. `rows` may be 1..4; each
// active row runs the identical k-ordered FMA sequence.
inline void nn_block16_f32(float* c, std::size_t ldc, const float* a, std::size_t lda,
                           const float* b, std::size_t ldb, std::size_t rows, std::size_t k,
                           std::size_t j, bool accumulate) {
  __m256 acc[4][2];
  for (std::size_t r = 0; r < rows; ++r) {
    if (accumulate) {
      acc[r][0] = _mm256_loadu_ps(c + r * ldc + j);
      acc[r][1] = _mm256_loadu_ps(c + r * ldc + j + 8);
    } else {
      acc[r][0] = _mm256_setzero_ps();
      acc[r][1] = _mm256_setzero_ps();
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m256 b0 = _mm256_loadu_ps(b + p * ldb + j);
    const __m256 b1 = _mm256_loadu_ps(b + p * ldb + j + 8);
    for (std::size_t r = 0; r < rows; ++r) {
      const __m256 av = _mm256_set1_ps(a[r * lda + p]);
      acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    _mm256_storeu_ps(c + r * ldc + j, acc[r][0]);
    _mm256_storeu_ps(c + r * ldc + j + 8, acc[r][1]);
  }
}

inline void nn_block8_f32(float* c, std::size_t ldc, const float* a, std::size_t lda,
                          const float* b, std::size_t ldb, std::size_t rows, std::size_t k,
                          std::size_t j, bool accumulate) {
  __m256 acc[4];
  for (std::size_t r = 0; r < rows; ++r) {
    acc[r] = accumulate ? _mm256_loadu_ps(c + r * ldc + j) : _mm256_setzero_ps();
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m256 b0 = _mm256_loadu_ps(b + p * ldb + j);
    for (std::size_t r = 0; r < rows; ++r) {
      acc[r] = _mm256_fmadd_ps(_mm256_set1_ps(a[r * lda + p]), b0, acc[r]);
    }
  }
  for (std::size_t r = 0; r < rows; ++r) _mm256_storeu_ps(c + r * ldc + j, acc[r]);
}

}  // namespace

void matmul_nn_f32(float* c, std::size_t ldc, const float* a, std::size_t lda, const float* b,
                   std::size_t ldb, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; i += 4) {
    const std::size_t rows = (m - i < 4) ? (m - i) : 4;
    float* cblk = c + i * ldc;
    const float* ablk = a + i * lda;
    std::size_t j = 0;
    for (; j + 16 <= n; j += 16) nn_block16_f32(cblk, ldc, ablk, lda, b, ldb, rows, k, j, accumulate);
    for (; j + 8 <= n; j += 8) nn_block8_f32(cblk, ldc, ablk, lda, b, ldb, rows, k, j, accumulate);
    for (; j < n; ++j) {
      for (std::size_t r = 0; r < rows; ++r) {
        float acc = accumulate ? cblk[r * ldc + j] : 0.0f;
        for (std::size_t p = 0; p < k; ++p) acc = std::fma(ablk[r * lda + p], b[p * ldb + j], acc);
        cblk[r * ldc + j] = acc;
      }
    }
  }
}

void matmul_nt_f32(float* c, std::size_t ldc, const float* a, std::size_t lda, const float* b,
                   std::size_t ldb, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * lda;
    float* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b + j * ldb;
      __m256 acc = _mm256_setzero_ps();
      std::size_t p = 0;
      for (; p + 8 <= k; p += 8) {
        acc = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p), _mm256_loadu_ps(brow + p), acc);
      }
      float total = hsum(acc);
      for (; p < k; ++p) total = std::fma(arow[p], brow[p], total);
      crow[j] = accumulate ? crow[j] + total : total;
    }
  }
}

void matmul_tn_f32(float* c, std::size_t ldc, const float* a, std::size_t lda, const float* b,
                   std::size_t ldb, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < k; ++i) {
      float* crow = c + i * ldc;
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8) _mm256_storeu_ps(crow + j, _mm256_setzero_ps());
      for (; j < n; ++j) crow[j] = 0.0f;
    }
  }
  for (std::size_t r = 0; r < m; ++r) {
    const float* arow = a + r * lda;
    const float* brow = b + r * ldb;
    for (std::size_t i = 0; i < k; ++i) {
      const float av = arow[i];
      if (av == 0.0f) continue;  // rank-1 update with a zero coefficient is a no-op
      const __m256 vav = _mm256_set1_ps(av);
      float* crow = c + i * ldc;
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8) {
        _mm256_storeu_ps(crow + j,
                         _mm256_fmadd_ps(vav, _mm256_loadu_ps(brow + j), _mm256_loadu_ps(crow + j)));
      }
      for (; j < n; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
    }
  }
}

void matmul_tn_wide(double* c, std::size_t ldc, const float* a, std::size_t lda, const float* b,
                    std::size_t ldb, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t r = 0; r < m; ++r) {
    const float* arow = a + r * lda;
    const float* brow = b + r * ldb;
    for (std::size_t i = 0; i < k; ++i) {
      const double av = static_cast<double>(arow[i]);
      if (av == 0.0) continue;
      const __m256d vav = _mm256_set1_pd(av);
      double* crow = c + i * ldc;
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8) {
        const __m256 bv = _mm256_loadu_ps(brow + j);
        const __m256d blo = _mm256_cvtps_pd(_mm256_castps256_ps128(bv));
        const __m256d bhi = _mm256_cvtps_pd(_mm256_extractf128_ps(bv, 1));
        _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(vav, blo, _mm256_loadu_pd(crow + j)));
        _mm256_storeu_pd(crow + j + 4, _mm256_fmadd_pd(vav, bhi, _mm256_loadu_pd(crow + j + 4)));
      }
      for (; j < n; ++j) crow[j] = std::fma(av, static_cast<double>(brow[j]), crow[j]);
    }
  }
}

void adamw_update_f32(float* params, float* m1, float* m2, const float* grad, std::size_t n,
                      float lr, float beta1, float beta2, float eps, float inv_bias1,
                      float inv_bias2, float weight_decay) {
  const __m256 vb1 = _mm256_set1_ps(beta1);
  const __m256 vb2 = _mm256_set1_ps(beta2);
  const __m256 vomb1 = _mm256_set1_ps(1.0f - beta1);
  const __m256 vomb2 = _mm256_set1_ps(1.0f - beta2);
  const __m256 veps = _mm256_set1_ps(eps);
  const __m256 vib1 = _mm256_set1_ps(inv_bias1);
  const __m256 vib2 = _mm256_set1_ps(inv_bias2);
  const __m256 vwd = _mm256_set1_ps(weight_decay);
  const __m256 vlr = _mm256_set1_ps(lr);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 g = _mm256_loadu_ps(grad + i);
    const __m256 a = _mm256_add_ps(_mm256_mul_ps(vb1, _mm256_loadu_ps(m1 + i)),
                                   _mm256_mul_ps(vomb1, g));
    const __m256 v = _mm256_add_ps(_mm256_mul_ps(vb2, _mm256_loadu_ps(m2 + i)),
                                   _mm256_mul_ps(vomb2, _mm256_mul_ps(g, g)));
    _mm256_storeu_ps(m1 + i, a);
    _mm256_storeu_ps(m2 + i, v);
    const __m256 p = _mm256_loadu_ps(params + i);
    const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(_mm256_mul_ps(v, vib2)), veps);
    const __m256 update =
        _mm256_add_ps(_mm256_div_ps(_mm256_mul_ps(a, vib1), denom), _mm256_mul_ps(vwd, p));
    _mm256_storeu_ps(params + i, _mm256_sub_ps(p, _mm256_mul_ps(vlr, update)));
  }
  for (; i < n; ++i) {
    const float g = grad[i];
    const float a = beta1 * m1[i] + (1.0f - beta1) * g;
    const float v = beta2 * m2[i] + (1.0f - beta2) * (g * g);
    m1[i] = a;
    m2[i] = v;
    const float update = (a * inv_bias1) / (std::sqrt(v * inv_bias2) + eps) + weight_decay * params[i];
    params[i] -= lr * update;
  }
}

// ---- double variants ----

void axpy_f64(double* y, const double* x, double alpha, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

void add_f64(double* out, const double* a, const double* b, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

double dot_f64(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
  }
  double total = hsum(acc);
  for (; i < n; ++i) total = std::fma(a[i], b[i], total);
  return total;
}

double sum_sq_f64(const double* x, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    acc = _mm256_fmadd_pd(v, v, acc);
  }
  double total = hsum(acc);
  for (; i < n; ++i) total += x[i] * x[i];
  return total;
}

namespace {

inline void nn_block8_f64(double* c, std::size_t ldc, const double* a, std::size_t lda,
                          const double* b, std::size_t ldb, std::size_t rows, std::size_t k,
                          std::size_t j, bool accumulate) {
  __m256d acc[4][2];
  for (std::size_t r = 0; r < rows; ++r) {
    if (accumulate) {
      acc[r][0] = _mm256_loadu_pd(c + r * ldc + j);
      acc[r][1] = _mm256_loadu_pd(c + r * ldc + j + 4);
    } else {
      acc[r][0] = _mm256_setzero_pd();
      acc[r][1] = _mm256_setzero_pd();
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * ldb + j);
    const __m256d b1 = _mm256_loadu_pd(b + p * ldb + j + 4);
    for (std::size_t r = 0; r < rows; ++r) {
      const __m256d av = _mm256_set1_pd(a[r * lda + p]);
      acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    _mm256_storeu_pd(c + r * ldc + j, acc[r][0]);
    _mm256_storeu_pd(c + r * ldc + j + 4, acc[r][1]);
  }
}

}  // namespace

void matmul_nn_f64(double* c, std::size_t ldc, const double* a, std::size_t lda, const double* b,
                   std::size_t ldb, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; i += 4) {
    const std::size_t rows = (m - i < 4) ? (m - i) : 4;
    double* cblk = c + i * ldc;
    const double* ablk = a + i * lda;
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) nn_block8_f64(cblk, ldc, ablk, lda, b, ldb, rows, k, j, accumulate);
    for (; j < n; ++j) {
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = accumulate ? cblk[r * ldc + j] : 0.0;
        for (std::size_t p = 0; p < k; ++p) acc = std::fma(ablk[r * lda + p], b[p * ldb + j], acc);
        cblk[r * ldc + j] = acc;
      }
    }
  }
}

void matmul_nt_f64(double* c, std::size_t ldc, const double* a, std::size_t lda, const double* b,
                   std::size_t ldb, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * lda;
    double* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * ldb;
      __m256d acc = _mm256_setzero_pd();
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(arow + p), _mm256_loadu_pd(brow + p), acc);
      }
      double total = hsum(acc);
      for (; p < k; ++p) total = std::fma(arow[p], brow[p], total);
      crow[j] = accumulate ? crow[j] + total : total;
    }
  }
}

void matmul_tn_f64(double* c, std::size_t ldc, const double* a, std::size_t lda, const double* b,
                   std::size_t ldb, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < k; ++i) {
      double* crow = c + i * ldc;
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    }
  }
  for (std::size_t r = 0; r < m; ++r) {
    const double* arow = a + r * lda;
    const double* brow = b + r * ldb;
    for (std::size_t i = 0; i < k; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      const __m256d vav = _mm256_set1_pd(av);
      double* crow = c + i * ldc;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        _mm256_storeu_pd(crow + j,
                         _mm256_fmadd_pd(vav, _mm256_loadu_pd(brow + j), _mm256_loadu_pd(crow + j)));
      }
      for (; j < n; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
    }
  }
}

}  // namespace dpge::kern::avx2

#endif  // DPGE_HAVE_AVX2
