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
#ifndef DPGE_ACCOUNTANT_HPP_
#define DPGE_ACCOUNTANT_HPP_

#include <cstdint>
#include <optional>
#include <vector>

// Renyi-DP accounting for the (Poisson-)subsampled Gaussian mechanism with
// conversion to (epsilon, delta)-DP and binary-search calibration of the
// noise multiplier. All functions are pure; arithmetic is IEEE double.
//
// The neighboring-dataset notion is add/remove-one-record, matching Poisson
// subsampling. Per-step RDP values compose additively across steps.

namespace dpge::accountant {

// Privacy parameters for one training run.
struct PrivacySpec {
  double target_epsilon = 0.0;                 // privacy budget to hit
  double delta = 0.0;                          // failure probability, in (0,1)
  double sampling_rate = 0.0;                  // expected batch fraction q per step
  std::uint64_t steps = 0;
  std::optional<double> noise_multiplier;      // sigma; unset until calibrated
  double clip_norm = 1.0;

  // Throws ValidationError naming the offending field.
  void validate() const;
};

// Strictly increasing integer Renyi orders, all >= 2.
struct OrderGrid {
  std::vector<int> orders;

  // Integers 2..64 plus {128, 256, 512}.
  static OrderGrid default_grid();
  void validate() const;
};

// Accumulated Renyi divergence over an order grid.
struct RdpCurve {
  OrderGrid orders;
  std::vector<double> values;  // same length as orders, non-negative
};

struct GaussianMechanismSpec {
  double sensitivity = 1.0;  // global L2 sensitivity
  double epsilon = 0.0;
  double delta = 0.0;
};

// Standard deviation of the classical Gaussian mechanism:
// sigma = S * sqrt(2 ln(1.25/delta)) / epsilon.
double gaussian_sigma_for(const GaussianMechanismSpec& spec);

// Per-application Renyi divergence of the Gaussian mechanism at sensitivity
// 1: alpha / (2 sigma^2). Valid for any real order > 1.
double rdp_gaussian(double sigma, double order);

// Per-step RDP of the Poisson-subsampled Gaussian mechanism at an integer
// order >= 2, via the log-domain binomial expansion
//   (1/(alpha-1)) * ln( sum_{j=0}^{alpha} C(alpha,j) (1-q)^(alpha-j) q^j
//                       exp(j(j-1)/(2 sigma^2)) ).
// Reduces exactly to rdp_gaussian at q=1 and to 0 at q=0.
double rdp_subsampled_gaussian(double q, double sigma, int order);

// Per-step curve over a grid.
RdpCurve per_step_curve(double q, double sigma, const OrderGrid& grid);

// Additive composition: every value multiplied by `steps`.
RdpCurve compose(const RdpCurve& per_step, std::uint64_t steps);

struct EpsResult {
  double epsilon = 0.0;
  int best_order = 0;
};

// Classic conversion: min over alpha of eps_rdp(alpha) + ln(1/delta)/(alpha-1),
// ties broken toward the smallest order.
EpsResult rdp_to_eps(const RdpCurve& curve, double delta);

// rdp_to_eps(compose(per_step_curve(q, sigma, grid), steps), delta).
EpsResult account(double q, double sigma, std::uint64_t steps, double delta,
                  const OrderGrid& grid);

struct CalibrationOptions {
  double sigma_lo = 1e-3;
  double sigma_hi = 1e3;
  double sigma_lo_limit = 1e-6;   // automatic geometric expansion floor
  double sigma_hi_limit = 1e6;    // automatic geometric expansion ceiling
  int max_iterations = 200;
  double rel_tol = 1e-3;
};

// Binary search for the noise multiplier whose accounted epsilon lands in
// [target*(1-rel_tol), target]. The returned sigma is the upper endpoint of
// the final bracket, so the accounted epsilon never exceeds the target. If
// every probed sigma already satisfies the target (e.g. q = 0), the smallest
// probed sigma is returned.
// Throws ConfigError when the target is unreachable within the expansion
// limits and NumericError when the search fails to converge.
double calibrate_sigma(double target_epsilon, double delta, double q, std::uint64_t steps,
                       const OrderGrid& grid, const CalibrationOptions& options = {});

// min(1e-5, 1/(10 N)): delta should stay well below one over the dataset size.
double default_delta(std::size_t dataset_size);

}  // namespace dpge::accountant

#endif  // DPGE_ACCOUNTANT_HPP_
