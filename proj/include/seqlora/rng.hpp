// SPDX-License-Identifier: Apache-2.0
//
// Counter-based, splittable 64-bit generator. The i-th output of a stream is
// a pure function of (key, i), so any job can own an independent split of
// the root seed and results never depend on scheduling.

#pragma once

#include <cstdint>
#include <limits>

#include "seqlora/matrix.hpp"

namespace seqlora {

class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return next_u64(); }

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller.
  double normal();
  /// ±1 with equal probability.
  double rademacher();
  /// Uniform on [−√3, √3] (zero mean, unit variance).
  double uniform_unit_variance();

  /// Independent child stream; split(i) is deterministic in (key, i) and
  /// does not advance this generator.
  Rng split(std::uint64_t index) const;

  std::uint64_t key() const noexcept { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

/// 64-bit finalizer used by the generator (SplitMix64 mixing function).
std::uint64_t mix64(std::uint64_t x) noexcept;

enum class EntrySampler { gaussian, rademacher, uniform };

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0);
Matrix sample_matrix(std::size_t rows, std::size_t cols, Rng& rng, EntrySampler sampler);

}  // namespace seqlora
