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
#ifndef DPGE_KERNELS_AVX2_HPP_
#define DPGE_KERNELS_AVX2_HPP_

#include <cstddef>

#ifdef DPGE_HAVE_AVX2

namespace dpge::kern::avx2 {

void axpy_f32(float* y, const float* x, float alpha, std::size_t n);
void scale_f32(float* x, float alpha, std::size_t n);
void add_f32(float* out, const float* a, const float* b, std::size_t n);
void hadamard_f32(float* out, const float* a, const float* b, std::size_t n);
float dot_f32(const float* a, const float* b, std::size_t n);
double sum_sq_f32(const float* x, std::size_t n);
void accum_f64_f32(double* acc, const float* x, std::size_t n);
void exp_shift_f32(float* out, const float* x, float shift, std::size_t n);
void copy_stream_f32(float* dst, const float* src, std::size_t n);
void matmul_nn_f32(float* c, std::size_t ldc, const float* a, std::size_t lda, const float* b,
                   std::size_t ldb, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void matmul_nt_f32(float* c, std::size_t ldc, const float* a, std::size_t lda, const float* b,
                   std::size_t ldb, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void matmul_tn_f32(float* c, std::size_t ldc, const float* a, std::size_t lda, const float* b,
                   std::size_t ldb, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void matmul_tn_wide(double* c, std::size_t ldc, const float* a, std::size_t lda, const float* b,
                    std::size_t ldb, std::size_t m, std::size_t k, std::size_t n);
void adamw_update_f32(float* params, float* m1, float* m2, const float* grad, std::size_t n,
                      float lr, float beta1, float beta2, float eps, float inv_bias1,
                      float inv_bias2, float weight_decay);

void axpy_f64(double* y, const double* x, double alpha, std::size_t n);
void add_f64(double* out, const double* a, const double* b, std::size_t n);
double dot_f64(const double* a, const double* b, std::size_t n);
double sum_sq_f64(const double* x, std::size_t n);
void matmul_nn_f64(double* c, std::size_t ldc, const double* a, std::size_t lda, const double* b,
                   std::size_t ldb, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void matmul_nt_f64(double* c, std::size_t ldc, const double* a, std::size_t lda, const double* b,
                   std::size_t ldb, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void matmul_tn_f64(double* c, std::size_t ldc, const double* a, std::size_t lda, const double* b,
                   std::size_t ldb, std::size_t m, std::size_t k, std::size_t n, bool accumulate);

}  // namespace dpge::kern::avx2

#endif  // DPGE_HAVE_AVX2

#endif  // DPGE_KERNELS_AVX2_HPP_
