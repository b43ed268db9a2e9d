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
#include "dpge/accountant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "dpge/error.hpp"

namespace dpge::accountant {
namespace {

void require(bool ok, const char* message) {
  if (!ok) throw ValidationError(message);
}

double log_binomial(int n, int j) {
  return std::lgamma(n + 1.0) - std::lgamma(j + 1.0) - std::lgamma(n - j + 1.0);
}

}  // namespace

void PrivacySpec::validate() const {
  require(target_epsilon > 0.0, "privacy spec: target_epsilon must be positive");
  require(delta > 0.0 && delta < 1.0, "privacy spec: delta must lie in (0, 1)");
  require(sampling_rate >= 0.0 && sampling_rate <= 1.0,
          "privacy spec: sampling_rate must lie in [0, 1]");
  require(clip_norm > 0.0, "privacy spec: clip_norm must be positive");
  if (noise_multiplier.has_value()) {
    require(*noise_multiplier > 0.0, "privacy spec: noise_multiplier must be positive when set");
  }
}

OrderGrid OrderGrid::default_grid() {
  OrderGrid grid;
  for (int a = 2; a <= 64; ++a) grid.orders.push_back(a);
  grid.orders.push_back(128);
  grid.orders.push_back(256);
  grid.orders.push_back(512);
  return grid;
}

void OrderGrid::validate() const {
  require(!orders.empty(), "order grid: must be non-empty");
  int prev = 1;
  for (const int a : orders) {
    require(a >= 2, "order grid: orders must be integers >= 2");
    require(a > prev, "order grid: orders must be strictly increasing");
    prev = a;
  }
}

double gaussian_sigma_for(const GaussianMechanismSpec& spec) {
  require(spec.sensitivity > 0.0, "gaussian mechanism: sensitivity must be positive");
  require(spec.epsilon > 0.0, "gaussian mechanism: epsilon must be positive");
  require(spec.delta > 0.0 && spec.delta < 1.0, "gaussian mechanism: delta must lie in (0, 1)");
  return spec.sensitivity * std::sqrt(2.0 * std::log(1.25 / spec.delta)) / spec.epsilon;
}

double rdp_gaussian(double sigma, double order) {
  require(sigma > 0.0, "rdp_gaussian: sigma must be positive");
  require(order > 1.0, "rdp_gaussian: order must exceed 1");
  return order / (2.0 * sigma * sigma);
}

double rdp_subsampled_gaussian(double q, double sigma, int order) {
  require(q >= 0.0 && q <= 1.0, "rdp_subsampled_gaussian: q must lie in [0, 1]");
  require(sigma > 0.0, "rdp_subsampled_gaussian: sigma must be positive");
  require(order >= 2, "rdp_subsampled_gaussian: order must be an integer >= 2");
  if (q == 0.0) return 0.0;
  if (q == 1.0) return rdp_gaussian(sigma, order);

  // logsumexp over the binomial terms; max extraction keeps the largest
  // exponent at exp(0).
  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  const double inv_2s2 = 1.0 / (2.0 * sigma * sigma);
  std::vector<double> log_terms(static_cast<std::size_t>(order) + 1);
  double max_term = -std::numeric_limits<double>::infinity();
  for (int j = 0; j <= order; ++j) {
    const double t = log_binomial(order, j) + (order - j) * log_1mq + j * log_q +
                     static_cast<double>(j) * (j - 1) * inv_2s2;
    log_terms[static_cast<std::size_t>(j)] = t;
    max_term = std::max(max_term, t);
  }
  double sum = 0.0;
  for (const double t : log_terms) sum += std::exp(t - max_term);
  const double log_a = max_term + std::log(sum);
  // The sum is >= 1 analytically; clamp away negative rounding residue.
  return std::max(0.0, log_a / (order - 1));
}

RdpCurve per_step_curve(double q, double sigma, const OrderGrid& grid) {
  grid.validate();
  RdpCurve curve;
  curve.orders = grid;
  curve.values.reserve(grid.orders.size());
  for (const int a : grid.orders) curve.values.push_back(rdp_subsampled_gaussian(q, sigma, a));
  return curve;
}

RdpCurve compose(const RdpCurve& per_step, std::uint64_t steps) {
  RdpCurve out = per_step;
  const double t = static_cast<double>(steps);
  for (double& v : out.values) v *= t;
  return out;
}

EpsResult rdp_to_eps(const RdpCurve& curve, double delta) {
  curve.orders.validate();
  require(curve.values.size() == curve.orders.orders.size(),
          "rdp_to_eps: values and orders must have the same length");
  require(delta > 0.0 && delta < 1.0, "rdp_to_eps: delta must lie in (0, 1)");
  const double log_inv_delta = std::log(1.0 / delta);
  EpsResult best{std::numeric_limits<double>::infinity(), 0};
  for (std::size_t i = 0; i < curve.values.size(); ++i) {
    const int a = curve.orders.orders[i];
    const double eps = curve.values[i] + log_inv_delta / (a - 1);
    if (eps < best.epsilon) {
      best.epsilon = eps;
      best.best_order = a;
    }
  }
  return best;
}

EpsResult account(double q, double sigma, std::uint64_t steps, double delta,
                  const OrderGrid& grid) {
  return rdp_to_eps(compose(per_step_curve(q, sigma, grid), steps), delta);
}

double calibrate_sigma(double target_epsilon, double delta, double q, std::uint64_t steps,
                       const OrderGrid& grid, const CalibrationOptions& options) {
  require(target_epsilon > 0.0, "calibrate_sigma: target_epsilon must be positive");
  grid.validate();
  const auto eps_at = [&](double sigma) { return account(q, sigma, steps, delta, grid).epsilon; };

  double lo = options.sigma_lo;
  double hi = options.sigma_hi;
  // Expand the bracket geometrically until eps(lo) > target >= eps(hi);
  // eps is non-increasing in sigma.
  while (eps_at(hi) > target_epsilon) {
    hi *= 10.0;
    if (hi > options.sigma_hi_limit) {
      std::ostringstream msg;
      msg << "calibrate_sigma: target epsilon " << target_epsilon
          << " is unreachable: accounted epsilon is still " << eps_at(options.sigma_hi_limit)
          << " at sigma " << options.sigma_hi_limit
          << " (the RDP-to-DP conversion floor exceeds the target)";
      throw ConfigError(msg.str());
    }
  }
  while (eps_at(lo) <= target_epsilon) {
    lo *= 0.1;
    if (lo < options.sigma_lo_limit) {
      // Every probed sigma meets the target (e.g. q == 0); noise below the
      // probe floor has no accounting benefit, so return the smallest probe.
      return options.sigma_lo_limit;
    }
  }

  // Invariant: eps(lo) > target >= eps(hi). Return hi once it is within
  // rel_tol below the target; rounding to the upper endpoint keeps the
  // guarantee on the safe side.
  for (int it = 0; it < options.max_iterations; ++it) {
    if (eps_at(hi) >= target_epsilon * (1.0 - options.rel_tol)) return hi;
    const double mid = std::sqrt(lo * hi);
    if (eps_at(mid) <= target_epsilon) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  std::ostringstream msg;
  msg << "calibrate_sigma: no convergence after " << options.max_iterations
      << " iterations; bracket [" << lo << ", " << hi << "], accounted epsilon at upper endpoint "
      << eps_at(hi) << ", target " << target_epsilon << " (rel_tol " << options.rel_tol << ")";
  throw NumericError(msg.str());
}

double default_delta(std::size_t dataset_size) {
  if (dataset_size == 0) return 1e-5;
  return std::min(1e-5, 1.0 / (10.0 * static_cast<double>(dataset_size)));
}

}  // namespace dpge::accountant
