// SPDX-License-Identifier: Apache-2.0

#include "seqlora/rng.hpp"

#include <cmath>
#include <numbers>

namespace seqlora {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kSplitSalt = 0xD1B54A32D192ED03ULL;
}  // namespace

std::uint64_t mix64(std::uint64_t x) noexcept {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

Rng::Rng(std::uint64_t seed) : key_(mix64(seed + kGolden)) {}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_normal_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_normal_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

double Rng::rademacher() { return (next_u64() >> 63) != 0 ? 1.0 : -1.0; }

double Rng::uniform_unit_variance() { return std::sqrt(3.0) * (2.0 * uniform() - 1.0); }

Rng Rng::split(std::uint64_t index) const {
  Rng child(0);
  child.key_ = mix64(key_ ^ mix64(index * kSplitSalt + kGolden));
  return child;
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = stddev * rng.normal();
  return m;
}

Matrix sample_matrix(std::size_t rows, std::size_t cols, Rng& rng, EntrySampler sampler) {
  Matrix m(rows, cols);
  for (double& v : m.data()) {
    switch (sampler) {
      case EntrySampler::gaussian: v = rng.normal(); break;
      case EntrySampler::rademacher: v = rng.rademacher(); break;
      case EntrySampler::uniform: v = rng.uniform_unit_variance(); break;
    }
  }
  return m;
}

}  // namespace seqlora
