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
#include "dpge/rng.hpp"

#include <cmath>
#include <vector>

#include <doctest.h>

using namespace dpge;

TEST_CASE("philox stream is deterministic and key-sensitive") {
  rng::Stream a(42, 1);
  rng::Stream b(42, 1);
  rng::Stream c(42, 2);
  bool any_diff = false;
  for (int i = 0; i < 64; ++i) {
    const auto va = a.next_u64();
    CHECK(va == b.next_u64());
    any_diff |= va != c.next_u64();
  }
  CHECK(any_diff);
}

TEST_CASE("uniform_int stays in range and covers small supports") {
  rng::Stream s(7, 0);
  std::vector<int> seen(5, 0);
  for (int i = 0; i < 2000; ++i) {
    const auto v = s.uniform_int(5);
    REQUIRE(v < 5);
    ++seen[static_cast<std::size_t>(v)];
  }
  for (const int count : seen) CHECK(count > 300);
}

TEST_CASE("normal moments are sane") {
  rng::Stream s(11, 0);
  const int n = 20000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = s.normal();
    sum += z;
    sum_sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(sum_sq / n == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("noise source draws are pure functions of (seed, index)") {
  rng::GaussianNoiseSource src_a(123);
  rng::GaussianNoiseSource src_b(123);
  std::vector<double> a(33), b(33);
  src_a.draw(5, 2.0, a);
  src_b.draw(5, 2.0, b);
  CHECK(a == b);
  CHECK(src_a.draws() == 1);

  std::vector<double> c(33);
  src_b.draw(6, 2.0, c);
  CHECK(a != c);
  CHECK(src_b.draws() == 2);
}

TEST_CASE("truncated normal respects the bound") {
  rng::Stream s(3, 9);
  for (int i = 0; i < 5000; ++i) {
    CHECK(std::abs(s.truncated_normal(2.0)) <= 2.0);
  }
}
