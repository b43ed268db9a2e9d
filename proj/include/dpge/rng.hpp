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
#ifndef DPGE_RNG_HPP_
#define DPGE_RNG_HPP_

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace dpge::rng {

// Philox-4x32-10 counter-based generator. Every output block is a pure
// function of (key, counter), which is what makes training trajectories
// reproducible regardless of shard decomposition or thread count: a stream
// consumer addresses blocks by index instead of advancing shared state.
struct Philox4x32 {
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  std::uint32_t key0, key1;

  explicit Philox4x32(std::uint64_t key)
      : key0(static_cast<std::uint32_t>(key)), key1(static_cast<std::uint32_t>(key >> 32)) {}

  static inline void round(std::array<std::uint32_t, 4>& ctr, std::uint32_t k0, std::uint32_t k1) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
    const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
    const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ k0, lo1, hi0 ^ ctr[3] ^ k1, lo0};
  }

  std::array<std::uint32_t, 4> block(std::uint64_t hi, std::uint64_t lo) const {
    std::array<std::uint32_t, 4> ctr = {
        static_cast<std::uint32_t>(lo), static_cast<std::uint32_t>(lo >> 32),
        static_cast<std::uint32_t>(hi), static_cast<std::uint32_t>(hi >> 32)};
    std::uint32_t k0 = key0, k1 = key1;
    for (int r = 0; r < 10; ++r) {
      round(ctr, k0, k1);
      k0 += kWeyl0;
      k1 += kWeyl1;
    }
    return ctr;
  }
};

// SplitMix64, used to derive independent stream keys from a master seed.
inline std::uint64_t split_mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream) {
  return split_mix(split_mix(seed) ^ split_mix(stream * 0xD1B54A32D192ED03ull + 1));
}

// Stateful convenience wrapper: a Philox stream consumed sequentially.
class Stream {
 public:
  Stream(std::uint64_t seed, std::uint64_t stream_id)
      : philox_(derive_key(seed, stream_id)) {}

  std::uint64_t next_u64() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const auto b = philox_.block(0, counter_++);
    have_spare_ = true;
    spare_ = (static_cast<std::uint64_t>(b[2]) << 32) | b[3];
    return (static_cast<std::uint64_t>(b[0]) << 32) | b[1];
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) {
    // Rejection sampling on the top bits keeps the draw unbiased.
    const std::uint64_t threshold = (0ull - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  double normal() {
    if (have_normal_) {
      have_normal_ = false;
      return spare_normal_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    have_normal_ = true;
    spare_normal_ = radius * std::sin(angle);
    return radius * std::cos(angle);
  }

  // Standard normal truncated to [-bound, bound] by rejection.
  double truncated_normal(double bound) {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= bound) return z;
    }
  }

 private:
  Philox4x32 philox_;
  std::uint64_t counter_ = 0;
  std::uint64_t spare_ = 0;
  bool have_spare_ = false;
  double spare_normal_ = 0.0;
  bool have_normal_ = false;
};

// Gaussian noise addressed by (seed, draw index). Drawing is a pure function
// of its arguments; the instance only counts how many draws were made so the
// one-draw-per-logical-batch invariant can be asserted.
class GaussianNoiseSource {
 public:
  explicit GaussianNoiseSource(std::uint64_t seed) : seed_(seed) {}

  // Fills `out` with N(0, stddev^2). One call is one draw.
  void draw(std::uint64_t draw_index, double stddev, std::span<double> out) {
    const Philox4x32 philox(derive_key(seed_, draw_index));
    for (std::size_t i = 0; i < out.size(); i += 2) {
      const auto b = philox.block(1, i / 2);
      const std::uint64_t w0 = (static_cast<std::uint64_t>(b[0]) << 32) | b[1];
      const std::uint64_t w1 = (static_cast<std::uint64_t>(b[2]) << 32) | b[3];
      double u1 = static_cast<double>(w0 >> 11) * 0x1.0p-53;
      if (u1 <= 0.0) u1 = 0x1.0p-53;
      const double u2 = static_cast<double>(w1 >> 11) * 0x1.0p-53;
      const double radius = std::sqrt(-2.0 * std::log(u1));
      const double angle = 2.0 * std::numbers::pi * u2;
      out[i] = stddev * radius * std::cos(angle);
      if (i + 1 < out.size()) out[i + 1] = stddev * radius * std::sin(angle);
    }
    ++draws_;
  }

  std::uint64_t draws() const { return draws_; }

 private:
  std::uint64_t seed_;
  std::uint64_t draws_ = 0;
};

}  // namespace dpge::rng

#endif  // DPGE_RNG_HPP_
