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
#ifndef DPGE_KERNELS_HPP_
#define DPGE_KERNELS_HPP_

#include <cstddef>
#include <string_view>

// Arithmetic inner loops used by the training engine. Every operation has a
// scalar reference implementation; hot float paths additionally have AVX2
// variants. The backend is picked once at startup (cpuid, overridable with
// DPGE_KERNEL=scalar|avx2) and the two are equivalence-tested against each
// other.
//
// Determinism contract: for a fixed backend, every output element is a fixed
// sequence of operations on its inputs, independent of how the surrounding
// call tiles rows or how many worker threads run. In particular, C[i,j] of a
// matmul_* call is bit-identical whether the row i is processed alone or as
// part of a larger row block.

namespace dpge::kern {

enum class Backend { kScalar, kAvx2 };

Backend active_backend();
bool backend_supported(Backend b);
// Throws ValidationError if the backend is not available on this machine.
void set_backend(Backend b);
std::string_view backend_name(Backend b);

// ---- elementwise / BLAS-1 ----

template <typename T>
void fill(T* x, std::size_t n, T value);

// y += alpha * x
template <typename T>
void axpy(T* y, const T* x, T alpha, std::size_t n);

// x *= alpha
template <typename T>
void scale(T* x, T alpha, std::size_t n);

// out = a + b
template <typename T>
void add(T* out, const T* a, const T* b, std::size_t n);

// out = a * b (Hadamard)
template <typename T>
void hadamard(T* out, const T* a, const T* b, std::size_t n);

template <typename T>
T dot(const T* a, const T* b, std::size_t n);

// Sum of squares, accumulated in double.
template <typename T>
double sum_sq(const T* x, std::size_t n);

// acc += x, widening to double.
template <typename T>
void accum_f64(double* acc, const T* x, std::size_t n);

// out[i] = exp(x[i] + shift). The AVX2 float path uses a polynomial within
// a few ulp of libm; backends stay equivalence-tested, not bit-identical.
template <typename T>
void exp_shift(T* out, const T* x, T shift, std::size_t n);

// dst = src, with non-temporal stores when the destination will not be
// read back soon (large per-sample gradient rows).
template <typename T>
void copy_stream(T* dst, const T* src, std::size_t n);

// ---- matmul family (row-major, explicit leading dimensions) ----
//
// matmul_nn: C[m,n] (+)= sum_k A[m,k] * B[k,n]        A: MxK, B: KxN
// matmul_nt: C[m,n] (+)= sum_k A[m,k] * B[n,k]        A: MxK, B: NxK
// matmul_tn: C[k,n] (+)= sum_m A[m,k] * B[m,n]        A: MxK, B: MxN, C: KxN
//
// matmul_nn and matmul_nt parallelize over rows of C when M is large;
// matmul_tn is a serial rank-M accumulation (used for weight gradients,
// where determinism of the m-ordered fold matters).

template <typename T>
void matmul_nn(T* c, std::size_t ldc, const T* a, std::size_t lda, const T* b, std::size_t ldb,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate);

template <typename T>
void matmul_nt(T* c, std::size_t ldc, const T* a, std::size_t lda, const T* b, std::size_t ldb,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate);

template <typename T>
void matmul_tn(T* c, std::size_t ldc, const T* a, std::size_t lda, const T* b, std::size_t ldb,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// matmul_tn with float inputs accumulating into a double C (the 64-bit
// reduction used by batch-mode weight gradients).
void matmul_tn_wide(double* c, std::size_t ldc, const float* a, std::size_t lda, const float* b,
                    std::size_t ldb, std::size_t m, std::size_t k, std::size_t n);

// ---- fused optimizer step ----
//
// Bias-corrected Adam moment update followed by decoupled weight decay:
//   m1 = beta1*m1 + (1-beta1)*g
//   m2 = beta2*m2 + (1-beta2)*g^2
//   p -= lr * ( (m1*inv_bias1) / (sqrt(m2*inv_bias2) + eps) + weight_decay*p )
template <typename T>
void adamw_update(T* params, T* m1, T* m2, const T* grad, std::size_t n, T lr, T beta1, T beta2,
                  T eps, T inv_bias1, T inv_bias2, T weight_decay);

}  // namespace dpge::kern

#endif  // DPGE_KERNELS_HPP_
