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
#ifndef DPGE_KERNELS_REF_HPP_
#define DPGE_KERNELS_REF_HPP_

#include <cmath>
#include <cstddef>

// Scalar reference kernels. Plain loops, no tiling tricks: these define the
// semantics the SIMD variants are tested against.

namespace dpge::kern::ref {

template <typename T>
void fill(T* x, std::size_t n, T value) {
  for (std::size_t i = 0; i < n; ++i) x[i] = value;
}

template <typename T>
void axpy(T* y, const T* x, T alpha, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void scale(T* x, T alpha, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

template <typename T>
void add(T* out, const T* a, const T* b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void hadamard(T* out, const T* a, const T* b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
double sum_sq(const T* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    acc += v * v;
  }
  return acc;
}

template <typename T>
void accum_f64(double* acc, const T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) acc[i] += static_cast<double>(x[i]);
}

template <typename T>
void exp_shift(T* out, const T* x, T shift, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(x[i] + shift);
}

template <typename T>
void copy_stream(T* dst, const T* src, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] = src[i];
}

template <typename T>
void matmul_nn(T* c, std::size_t ldc, const T* a, std::size_t lda, const T* b, std::size_t ldb,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (!accumulate) fill(crow, n, T(0));
    const T* arow = a + i * lda;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_nt(T* c, std::size_t ldc, const T* a, std::size_t lda, const T* b, std::size_t ldb,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * lda;
    T* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? crow[j] : T(0);
      const T* brow = b + j * ldb;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
}

template <typename T>
void matmul_tn(T* c, std::size_t ldc, const T* a, std::size_t lda, const T* b, std::size_t ldb,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < k; ++i) fill(c + i * ldc, n, T(0));
  }
  for (std::size_t r = 0; r < m; ++r) {
    const T* arow = a + r * lda;
    const T* brow = b + r * ldb;
    for (std::size_t i = 0; i < k; ++i) {
      const T av = arow[i];
      T* crow = c + i * ldc;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void matmul_tn_wide(double* c, std::size_t ldc, const float* a, std::size_t lda,
                           const float* b, std::size_t ldb, std::size_t m, std::size_t k,
                           std::size_t n) {
  for (std::size_t r = 0; r < m; ++r) {
    const float* arow = a + r * lda;
    const float* brow = b + r * ldb;
    for (std::size_t i = 0; i < k; ++i) {
      const double av = static_cast<double>(arow[i]);
      if (av == 0.0) continue;
      double* crow = c + i * ldc;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * static_cast<double>(brow[j]);
    }
  }
}

template <typename T>
void adamw_update(T* params, T* m1, T* m2, const T* grad, std::size_t n, T lr, T beta1, T beta2,
                  T eps, T inv_bias1, T inv_bias2, T weight_decay) {
  const T one_minus_b1 = T(1) - beta1;
  const T one_minus_b2 = T(1) - beta2;
  for (std::size_t i = 0; i < n; ++i) {
    const T g = grad[i];
    const T a = beta1 * m1[i] + one_minus_b1 * g;
    const T v = beta2 * m2[i] + one_minus_b2 * (g * g);
    m1[i] = a;
    m2[i] = v;
    const T update = (a * inv_bias1) / (std::sqrt(v * inv_bias2) + eps) + weight_decay * params[i];
    params[i] -= lr * update;
  }
}

}  // namespace dpge::kern::ref

#endif  // DPGE_KERNELS_REF_HPP_
