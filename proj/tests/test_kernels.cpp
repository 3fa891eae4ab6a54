// SPDX-License-Identifier: Apache-2.0

#include <vector>

#include <gtest/gtest.h>

#include "seqlora/kernels.hpp"
#include "seqlora/linalg.hpp"
#include "seqlora/rng.hpp"
#include "seqlora/theory.hpp"

using namespace seqlora;

TEST(Kernels, ParallelGemmMatchesSerialBitForBit) {
  Rng rng(9);
  for (auto [m, k, n] : std::vector<std::array<std::size_t, 3>>{{1, 1, 1}, {3, 5, 2}, {64, 48, 80}, {129, 7, 33}}) {
    const Matrix a = gaussian_matrix(m, k, rng), b = gaussian_matrix(k, n, rng);
    std::vector<double> cs(m * n), cp(m * n, 123.0);
    kernels::gemm_serial(a.data(), b.data(), cs, m, k, n);
    kernels::gemm_parallel(a.data(), b.data(), cp, m, k, n);
    EXPECT_EQ(cs, cp);
  }
}

TEST(Kernels, MatmulDispatchAgreesAcrossThreshold) {
  Rng rng(2);
  const Matrix a = gaussian_matrix(40, 40, rng), b = gaussian_matrix(40, 40, rng);
  std::vector<double> ref(1600);
  kernels::gemm_serial(a.data(), b.data(), ref, 40, 40, 40);
  const Matrix c = matmul(a, b);
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), ref);
}

TEST(Kernels, ForEachIndexVisitsEverySlotOnce) {
  for (kernels::Exec e : {kernels::Exec::serial, kernels::Exec::parallel}) {
    std::vector<int> hits(1000, 0);
    kernels::for_each_index(hits.size(), e, [&](std::size_t i) { hits[i] += 1; });
    for (int h : hits) EXPECT_EQ(h, 1);
  }
  EXPECT_GE(kernels::max_threads(), 1);
}

TEST(Kernels, MonteCarloStudiesIdenticalSerialAndParallel) {
  Rng rng(4);
  const ConceptTask task = make_linear_task(12, 12, SpectrumSpec::geometric(0.7), 0.0, rng);
  BasisRegistry reg(0, 12);
  reg.append(haar_frame(12, 3, rng));
  Rng r1(77), r2(77);
  const BasisStudy s = optimal_basis_study(task.sigma, reg, 2, 500, r1, kernels::Exec::serial);
  const BasisStudy p = optimal_basis_study(task.sigma, reg, 2, 500, r2, kernels::Exec::parallel);
  EXPECT_EQ(to_json(s).dump(), to_json(p).dump());

  const Matrix c = gaussian_matrix(12, 12, rng, 0.2);
  Rng h1(5), h2(5);
  const HWReport hs = hw_crosstalk_study(task.sigma, Matrix::identity(2), c, 2000, {0.1}, {1.0}, h1,
                                         EntrySampler::rademacher, kernels::Exec::serial);
  const HWReport hp = hw_crosstalk_study(task.sigma, Matrix::identity(2), c, 2000, {0.1}, {1.0}, h2,
                                         EntrySampler::rademacher, kernels::Exec::parallel);
  EXPECT_EQ(to_json(hs).dump(), to_json(hp).dump());
}
