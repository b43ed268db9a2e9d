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
#ifndef DPGE_TESTS_SUPPORT_ORACLES_HPP_
#define DPGE_TESTS_SUPPORT_ORACLES_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

// Test-only reference implementations, independent of the production code
// paths they check.

namespace dpge::oracles {

// Subsampled-Gaussian RDP at an integer order, evaluated in 80-bit extended
// precision. Binomial coefficients come from the exact recurrence
// C(a,j+1) = C(a,j) * (a-j)/(j+1) rather than lgamma; terms are summed in
// ascending order after max extraction.
inline long double rdp_subsampled_gaussian_ld(long double q, long double sigma, int order) {
  if (q == 0.0L) return 0.0L;
  if (q == 1.0L) return static_cast<long double>(order) / (2.0L * sigma * sigma);
  const long double log_q = std::log(q);
  const long double log_1mq = std::log1p(-q);
  const long double inv_2s2 = 1.0L / (2.0L * sigma * sigma);

  std::vector<long double> log_terms(static_cast<std::size_t>(order) + 1);
  long double log_binom = 0.0L;  // ln C(order, 0)
  for (int j = 0; j <= order; ++j) {
    log_terms[static_cast<std::size_t>(j)] = log_binom + (order - j) * log_1mq + j * log_q +
                                             static_cast<long double>(j) * (j - 1) * inv_2s2;
    if (j < order) {
      log_binom += std::log(static_cast<long double>(order - j)) -
                   std::log(static_cast<long double>(j + 1));
    }
  }
  std::vector<long double> sorted = log_terms;
  std::sort(sorted.begin(), sorted.end());
  const long double max_term = sorted.back();
  long double sum = 0.0L;
  for (const long double t : sorted) sum += std::exp(t - max_term);
  const long double log_a = max_term + std::log(sum);
  return std::max(0.0L, log_a / (order - 1));
}

// Full accountant in extended precision: compose + classic conversion over
// an order grid.
inline long double account_ld(long double q, long double sigma, std::uint64_t steps,
                              long double delta, const std::vector<int>& orders) {
  long double best = 1e300L;
  for (const int a : orders) {
    const long double rdp = rdp_subsampled_gaussian_ld(q, sigma, a) * steps;
    const long double eps = rdp + std::log(1.0L / delta) / (a - 1);
    best = std::min(best, eps);
  }
  return best;
}

}  // namespace dpge::oracles

#endif  // DPGE_TESTS_SUPPORT_ORACLES_HPP_
