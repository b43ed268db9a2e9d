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

#include <cmath>

#include <doctest.h>

#include "dpge/error.hpp"
#include "dpge/rng.hpp"
#include "support/oracles.hpp"

using namespace dpge;
using namespace dpge::accountant;

TEST_CASE("gaussian_sigma_for evaluates the classic mechanism") {
  // sigma^2 = 2 ln(1.25e5) at S=1, eps=1, delta=1e-5
  const double sigma = gaussian_sigma_for({1.0, 1.0, 1e-5});
  CHECK(sigma == doctest::Approx(std::sqrt(2.0 * std::log(1.25e5))).epsilon(1e-12));
  CHECK(sigma == doctest::Approx(4.84480).epsilon(1e-5));

  // linear in S, inverse-linear in eps
  CHECK(gaussian_sigma_for({2.0, 1.0, 1e-5}) == doctest::Approx(2.0 * sigma).epsilon(1e-15));
  CHECK(gaussian_sigma_for({1.0, 2.0, 1e-5}) == doctest::Approx(0.5 * sigma).epsilon(1e-15));

  CHECK_THROWS_AS(gaussian_sigma_for({0.0, 1.0, 1e-5}), ValidationError);
  CHECK_THROWS_AS(gaussian_sigma_for({1.0, -1.0, 1e-5}), ValidationError);
  CHECK_THROWS_AS(gaussian_sigma_for({1.0, 1.0, 1.5}), ValidationError);
}

TEST_CASE("rdp_gaussian closed form") {
  CHECK(rdp_gaussian(2.0, 8.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(rdp_gaussian(1.0, 2.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(rdp_gaussian(10.0, 32.0) == doctest::Approx(0.16).epsilon(1e-15));
  CHECK_THROWS_AS(rdp_gaussian(0.0, 2.0), ValidationError);
  CHECK_THROWS_AS(rdp_gaussian(1.0, 1.0), ValidationError);
}

TEST_CASE("subsampled RDP reduces exactly at q=0 and q=1") {
  const auto grid = OrderGrid::default_grid();
  for (const double sigma : {0.3, 0.5, 1.0, 2.0, 10.0}) {
    for (const int a : grid.orders) {
      CHECK(rdp_subsampled_gaussian(0.0, sigma, a) == 0.0);
      CHECK(std::abs(rdp_subsampled_gaussian(1.0, sigma, a) - rdp_gaussian(sigma, a)) <= 1e-12);
    }
  }
}

TEST_CASE("subsampled RDP input validation") {
  CHECK_THROWS_AS(rdp_subsampled_gaussian(-0.1, 1.0, 4), ValidationError);
  CHECK_THROWS_AS(rdp_subsampled_gaussian(1.1, 1.0, 4), ValidationError);
  CHECK_THROWS_AS(rdp_subsampled_gaussian(0.5, 0.0, 4), ValidationError);
  CHECK_THROWS_AS(rdp_subsampled_gaussian(0.5, 1.0, 1), ValidationError);
}

TEST_CASE("subsampled RDP matches the extended-precision oracle") {
  rng::Stream stream(17, 0);
  for (int trial = 0; trial < 60; ++trial) {
    const double q = 1e-4 + stream.uniform() * (0.1 - 1e-4);
    const double sigma = 0.3 + stream.uniform() * (5.0 - 0.3);
    const int order = 2 + static_cast<int>(stream.uniform_int(63));
    const double got = rdp_subsampled_gaussian(q, sigma, order);
    const long double want = oracles::rdp_subsampled_gaussian_ld(q, sigma, order);
    const double rel = std::abs(got - static_cast<double>(want)) /
                       std::max(1e-300, static_cast<double>(want));
    CHECK(rel <= 1e-9);
  }
}

TEST_CASE("compose multiplies values and is additive") {
  const auto grid = OrderGrid::default_grid();
  RdpCurve curve;
  curve.orders = grid;
  curve.values.assign(grid.orders.size(), 0.001);
  const auto c = compose(curve, 29000);
  for (const double v : c.values) CHECK(v == doctest::Approx(29.0).epsilon(1e-12));

  const auto zero = compose(curve, 0);
  for (const double v : zero.values) CHECK(v == 0.0);

  // compose(c, a+b) equals the elementwise sum of the two partial compositions
  const auto ab = compose(curve, 7 + 9);
  const auto a = compose(curve, 7);
  const auto b = compose(curve, 9);
  for (std::size_t i = 0; i < ab.values.size(); ++i) {
    CHECK(ab.values[i] == doctest::Approx(a.values[i] + b.values[i]).epsilon(1e-15));
  }
}

TEST_CASE("rdp_to_eps conversion and tie-breaking") {
  RdpCurve single;
  single.orders.orders = {10};
  single.values = {0.5};
  const auto r = rdp_to_eps(single, 1e-5);
  CHECK(r.epsilon == doctest::Approx(0.5 + std::log(1e5) / 9.0).epsilon(1e-12));
  CHECK(r.epsilon == doctest::Approx(1.77922).epsilon(1e-5));
  CHECK(r.best_order == 10);

  // all-zero curve: minimum at the largest order
  const auto grid = OrderGrid::default_grid();
  RdpCurve zero;
  zero.orders = grid;
  zero.values.assign(grid.orders.size(), 0.0);
  const auto z = rdp_to_eps(zero, 1e-5);
  CHECK(z.best_order == 512);
  CHECK(z.epsilon == doctest::Approx(std::log(1e5) / 511.0).epsilon(1e-12));

  // doubling all values never decreases epsilon
  RdpCurve base;
  base.orders = grid;
  rng::Stream stream(5, 1);
  for (std::size_t i = 0; i < grid.orders.size(); ++i) {
    base.values.push_back(stream.uniform() * 0.1);
  }
  RdpCurve doubled = base;
  for (double& v : doubled.values) v *= 2.0;
  CHECK(rdp_to_eps(doubled, 1e-5).epsilon >= rdp_to_eps(base, 1e-5).epsilon);

  // conversion bound: the result never exceeds any single-order evaluation
  const auto best = rdp_to_eps(base, 1e-5);
  for (std::size_t i = 0; i < base.values.size(); ++i) {
    CHECK(best.epsilon <=
          base.values[i] + std::log(1e5) / (base.orders.orders[i] - 1) + 1e-15);
  }

  // exact ties break toward the smallest order: with L = ln(1e5),
  // eps(3) = 0 + L/2 and eps(5) = (L/2 - L/4) + L/4 are the same double
  RdpCurve tie;
  tie.orders.orders = {3, 5};
  const double log_inv_delta = std::log(1.0 / 1e-5);  // as the conversion computes it
  tie.values = {0.0, log_inv_delta / 2.0 - log_inv_delta / 4.0};
  const auto t = rdp_to_eps(tie, 1e-5);
  CHECK(t.best_order == 3);

  RdpCurve empty;
  CHECK_THROWS_AS(rdp_to_eps(empty, 1e-5), ValidationError);
}

TEST_CASE("account: oracle agreement, reductions, monotonicity") {
  const auto grid = OrderGrid::default_grid();

  // single-step q=1 reduces to the plain Gaussian curve conversion
  const double sigma = gaussian_sigma_for({1.0, 1.0, 1e-5});
  const auto single = account(1.0, sigma, 1, 1e-5, grid);
  RdpCurve manual;
  manual.orders = grid;
  for (const int a : grid.orders) manual.values.push_back(rdp_gaussian(sigma, a));
  CHECK(single.epsilon == doctest::Approx(rdp_to_eps(manual, 1e-5).epsilon).epsilon(1e-12));

  // extended-precision reference accountant
  const auto got = account(0.004, 1.0, 10000, 1e-6, grid);
  const long double want = oracles::account_ld(0.004L, 1.0L, 10000, 1e-6L, grid.orders);
  CHECK(std::abs(got.epsilon - static_cast<double>(want)) <=
        1e-6 * static_cast<double>(want));

  // zero steps: conversion of the zero curve
  RdpCurve zero;
  zero.orders = grid;
  zero.values.assign(grid.orders.size(), 0.0);
  CHECK(account(0.01, 1.0, 0, 1e-6, grid).epsilon ==
        doctest::Approx(rdp_to_eps(zero, 1e-6).epsilon).epsilon(1e-15));

  // monotone: non-decreasing in steps and q, strictly decreasing in sigma
  const double e1 = account(0.01, 1.0, 1000, 1e-6, grid).epsilon;
  CHECK(account(0.01, 1.0, 2000, 1e-6, grid).epsilon >= e1);
  CHECK(account(0.02, 1.0, 1000, 1e-6, grid).epsilon >= e1);
  CHECK(account(0.01, 1.5, 1000, 1e-6, grid).epsilon < e1);
}

TEST_CASE("calibrate_sigma round trip") {
  const auto grid = OrderGrid::default_grid();
  const double q = std::pow(2.0, -10);
  const double target = 5.0;
  const double sigma = calibrate_sigma(target, 1e-6, q, 5000, grid);
  const double eps = account(q, sigma, 5000, 1e-6, grid).epsilon;
  CHECK(eps <= target);
  CHECK(eps >= target * (1.0 - 1e-3));

  // doubling steps at a fixed target does not decrease sigma
  const double sigma2 = calibrate_sigma(target, 1e-6, q, 10000, grid);
  CHECK(sigma2 >= sigma);

  // q=1, steps=1 reduces to calibrating a single Gaussian application
  const double s_single = calibrate_sigma(2.0, 1e-5, 1.0, 1, grid);
  const double e_single = account(1.0, s_single, 1, 1e-5, grid).epsilon;
  CHECK(e_single <= 2.0);
  CHECK(e_single >= 2.0 * (1.0 - 1e-3));
}

TEST_CASE("calibrate_sigma failure and degenerate regimes") {
  const auto grid = OrderGrid::default_grid();
  // a target below the conversion floor ln(1/delta)/511 is unreachable
  CHECK_THROWS_AS(calibrate_sigma(1e-6, 1e-6, 0.01, 1000, grid), ConfigError);
  // q = 0: every sigma satisfies the target; the probe floor comes back
  const double s0 = calibrate_sigma(1.0, 1e-6, 0.0, 1000, grid);
  CHECK(account(0.0, s0, 1000, 1e-6, grid).epsilon <= 1.0);
}

TEST_CASE("default delta honors the dataset-size rule") {
  // min(1e-5, 1/(10N)); large datasets push delta below the 1e-5 cap
  CHECK(default_delta(100) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(default_delta(1'000'000) == doctest::Approx(1e-7).epsilon(1e-12));
  CHECK(default_delta(20'000) == doctest::Approx(5e-6).epsilon(1e-12));
  CHECK(default_delta(0) == doctest::Approx(1e-5).epsilon(1e-12));
}

TEST_CASE("privacy spec validation names the offending field") {
  PrivacySpec spec;
  spec.target_epsilon = 5.0;
  spec.delta = 1e-5;
  spec.sampling_rate = 0.01;
  spec.clip_norm = 1.0;
  CHECK_NOTHROW(spec.validate());
  spec.delta = 1.0;
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("delta"), ValidationError);
  spec.delta = 1e-5;
  spec.sampling_rate = 1.5;
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("sampling_rate"), ValidationError);
  spec.sampling_rate = 0.01;
  spec.noise_multiplier = -1.0;
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("noise_multiplier"), ValidationError);
}
