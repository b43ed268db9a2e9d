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
#include "dpge/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <string>

#include "dpge/error.hpp"
#include "dpge/threadpool.hpp"
#include "kernels_avx2.hpp"
#include "kernels_ref.hpp"

namespace dpge::kern {
namespace {

bool cpu_has_avx2() {
#if defined(DPGE_HAVE_AVX2) && defined(__GNUC__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend detect_backend() {
  if (const char* env = std::getenv("DPGE_KERNEL")) {
    const std::string requested(env);
    if (requested == "scalar") return Backend::kScalar;
    if (requested == "avx2") {
      if (!cpu_has_avx2()) {
        throw ValidationError("DPGE_KERNEL=avx2 requested but AVX2/FMA is unavailable");
      }
      return Backend::kAvx2;
    }
    throw ValidationError("DPGE_KERNEL must be 'scalar' or 'avx2', got '" + requested + "'");
  }
  return cpu_has_avx2() ? Backend::kAvx2 : Backend::kScalar;
}

std::atomic<Backend>& backend_slot() {
  static std::atomic<Backend> slot{detect_backend()};
  return slot;
}

inline bool use_avx2() {
#ifdef DPGE_HAVE_AVX2
  return backend_slot().load(std::memory_order_relaxed) == Backend::kAvx2;
#else
  return false;
#endif
}

// Row threshold below which a matmul is not worth forking to the pool.
constexpr std::size_t kParallelRows = 128;

}  // namespace

Backend active_backend() { return backend_slot().load(std::memory_order_relaxed); }

bool backend_supported(Backend b) {
  return b == Backend::kScalar || (b == Backend::kAvx2 && cpu_has_avx2());
}

void set_backend(Backend b) {
  if (!backend_supported(b)) {
    throw ValidationError("kernel backend not supported on this machine");
  }
  backend_slot().store(b, std::memory_order_relaxed);
}

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::kScalar:
      return "scalar";
    case Backend::kAvx2:
      return "avx2";
  }
  return "unknown";
}

template <typename T>
void fill(T* x, std::size_t n, T value) {
  ref::fill(x, n, value);
}

template <typename T>
void axpy(T* y, const T* x, T alpha, std::size_t n) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) {
    if constexpr (std::is_same_v<T, float>) return avx2::axpy_f32(y, x, alpha, n);
    if constexpr (std::is_same_v<T, double>) return avx2::axpy_f64(y, x, alpha, n);
  }
#endif
  ref::axpy(y, x, alpha, n);
}

template <typename T>
void scale(T* x, T alpha, std::size_t n) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) {
    if constexpr (std::is_same_v<T, float>) return avx2::scale_f32(x, alpha, n);
  }
#endif
  ref::scale(x, alpha, n);
}

template <typename T>
void add(T* out, const T* a, const T* b, std::size_t n) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) {
    if constexpr (std::is_same_v<T, float>) return avx2::add_f32(out, a, b, n);
    if constexpr (std::is_same_v<T, double>) return avx2::add_f64(out, a, b, n);
  }
#endif
  ref::add(out, a, b, n);
}

template <typename T>
void hadamard(T* out, const T* a, const T* b, std::size_t n) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) {
    if constexpr (std::is_same_v<T, float>) return avx2::hadamard_f32(out, a, b, n);
  }
#endif
  ref::hadamard(out, a, b, n);
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) {
    if constexpr (std::is_same_v<T, float>) return avx2::dot_f32(a, b, n);
    if constexpr (std::is_same_v<T, double>) return avx2::dot_f64(a, b, n);
  }
#endif
  return ref::dot(a, b, n);
}

template <typename T>
double sum_sq(const T* x, std::size_t n) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) {
    if constexpr (std::is_same_v<T, float>) return avx2::sum_sq_f32(x, n);
    if constexpr (std::is_same_v<T, double>) return avx2::sum_sq_f64(x, n);
  }
#endif
  return ref::sum_sq(x, n);
}

template <typename T>
void accum_f64(double* acc, const T* x, std::size_t n) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) {
    if constexpr (std::is_same_v<T, float>) return avx2::accum_f64_f32(acc, x, n);
  }
#endif
  ref::accum_f64(acc, x, n);
}

namespace {

template <typename T>
void matmul_nn_rows(T* c, std::size_t ldc, const T* a, std::size_t lda, const T* b,
                    std::size_t ldb, std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) {
    if constexpr (std::is_same_v<T, float>)
      return avx2::matmul_nn_f32(c, ldc, a, lda, b, ldb, m, k, n, accumulate);
    if constexpr (std::is_same_v<T, double>)
      return avx2::matmul_nn_f64(c, ldc, a, lda, b, ldb, m, k, n, accumulate);
  }
#endif
  ref::matmul_nn(c, ldc, a, lda, b, ldb, m, k, n, accumulate);
}

template <typename T>
void matmul_nt_rows(T* c, std::size_t ldc, const T* a, std::size_t lda, const T* b,
                    std::size_t ldb, std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) {
    if constexpr (std::is_same_v<T, float>)
      return avx2::matmul_nt_f32(c, ldc, a, lda, b, ldb, m, k, n, accumulate);
    if constexpr (std::is_same_v<T, double>)
      return avx2::matmul_nt_f64(c, ldc, a, lda, b, ldb, m, k, n, accumulate);
  }
#endif
  ref::matmul_nt(c, ldc, a, lda, b, ldb, m, k, n, accumulate);
}

}  // namespace

template <typename T>
void matmul_nn(T* c, std::size_t ldc, const T* a, std::size_t lda, const T* b, std::size_t ldb,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (m >= kParallelRows && worker_threads() > 1) {
    parallel_for(m, 16, [&](std::size_t begin, std::size_t end) {
      matmul_nn_rows(c + begin * ldc, ldc, a + begin * lda, lda, b, ldb, end - begin, k, n,
                     accumulate);
    });
    return;
  }
  matmul_nn_rows(c, ldc, a, lda, b, ldb, m, k, n, accumulate);
}

template <typename T>
void matmul_nt(T* c, std::size_t ldc, const T* a, std::size_t lda, const T* b, std::size_t ldb,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (m >= kParallelRows && worker_threads() > 1) {
    parallel_for(m, 16, [&](std::size_t begin, std::size_t end) {
      matmul_nt_rows(c + begin * ldc, ldc, a + begin * lda, lda, b, ldb, end - begin, k, n,
                     accumulate);
    });
    return;
  }
  matmul_nt_rows(c, ldc, a, lda, b, ldb, m, k, n, accumulate);
}

template <typename T>
void matmul_tn(T* c, std::size_t ldc, const T* a, std::size_t lda, const T* b, std::size_t ldb,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) {
    if constexpr (std::is_same_v<T, float>)
      return avx2::matmul_tn_f32(c, ldc, a, lda, b, ldb, m, k, n, accumulate);
    if constexpr (std::is_same_v<T, double>)
      return avx2::matmul_tn_f64(c, ldc, a, lda, b, ldb, m, k, n, accumulate);
  }
#endif
  ref::matmul_tn(c, ldc, a, lda, b, ldb, m, k, n, accumulate);
}

template <typename T>
void exp_shift(T* out, const T* x, T shift, std::size_t n) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) {
    if constexpr (std::is_same_v<T, float>) return avx2::exp_shift_f32(out, x, shift, n);
  }
#endif
  ref::exp_shift(out, x, shift, n);
}

template <typename T>
void copy_stream(T* dst, const T* src, std::size_t n) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) {
    if constexpr (std::is_same_v<T, float>) return avx2::copy_stream_f32(dst, src, n);
  }
#endif
  ref::copy_stream(dst, src, n);
}

void matmul_tn_wide(double* c, std::size_t ldc, const float* a, std::size_t lda, const float* b,
                    std::size_t ldb, std::size_t m, std::size_t k, std::size_t n) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) return avx2::matmul_tn_wide(c, ldc, a, lda, b, ldb, m, k, n);
#endif
  ref::matmul_tn_wide(c, ldc, a, lda, b, ldb, m, k, n);
}

template <typename T>
void adamw_update(T* params, T* m1, T* m2, const T* grad, std::size_t n, T lr, T beta1, T beta2,
                  T eps, T inv_bias1, T inv_bias2, T weight_decay) {
#ifdef DPGE_HAVE_AVX2
  if (use_avx2()) {
    if constexpr (std::is_same_v<T, float>)
      return avx2::adamw_update_f32(params, m1, m2, grad, n, lr, beta1, beta2, eps, inv_bias1,
                                    inv_bias2, weight_decay);
  }
#endif
  ref::adamw_update(params, m1, m2, grad, n, lr, beta1, beta2, eps, inv_bias1, inv_bias2,
                    weight_decay);
}

// Explicit instantiations: float is the production type, double the 64-bit
// test mode.
#define DPGE_INSTANTIATE(T)                                                                       \
  template void fill<T>(T*, std::size_t, T);                                                      \
  template void axpy<T>(T*, const T*, T, std::size_t);                                            \
  template void scale<T>(T*, T, std::size_t);                                                     \
  template void add<T>(T*, const T*, const T*, std::size_t);                                      \
  template void hadamard<T>(T*, const T*, const T*, std::size_t);                                 \
  template T dot<T>(const T*, const T*, std::size_t);                                             \
  template double sum_sq<T>(const T*, std::size_t);                                               \
  template void accum_f64<T>(double*, const T*, std::size_t);                                     \
  template void exp_shift<T>(T*, const T*, T, std::size_t);                                       \
  template void copy_stream<T>(T*, const T*, std::size_t);                                       \
  template void matmul_nn<T>(T*, std::size_t, const T*, std::size_t, const T*, std::size_t,       \
                             std::size_t, std::size_t, std::size_t, bool);                        \
  template void matmul_nt<T>(T*, std::size_t, const T*, std::size_t, const T*, std::size_t,       \
                             std::size_t, std::size_t, std::size_t, bool);                        \
  template void matmul_tn<T>(T*, std::size_t, const T*, std::size_t, const T*, std::size_t,       \
                             std::size_t, std::size_t, std::size_t, bool);                        \
  template void adamw_update<T>(T*, T*, T*, const T*, std::size_t, T, T, T, T, T, T, T)

DPGE_INSTANTIATE(float);
DPGE_INSTANTIATE(double);
#undef DPGE_INSTANTIATE

}  // namespace dpge::kern
