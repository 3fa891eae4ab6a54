// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "seqlora/linalg.hpp"
#include "seqlora/theory.hpp"

using namespace seqlora;

namespace {

DescentTrace trace_of(std::vector<double> objectives) {
  DescentTrace t;
  for (std::size_t i = 0; i < objectives.size(); ++i) {
    TraceRecord r;
    r.iteration = i;
    r.objective = objectives[i];
    t.records.push_back(r);
  }
  return t;
}

FitResult small_fit(std::uint64_t seed, std::size_t concepts) {
  Rng rng(seed);
  auto stream = make_linear_stream(concepts, 10, 8, {SpectrumSpec::geometric(0.7)}, 0.05, 0.0, rng);
  const std::vector<Matrix> base{gaussian_matrix(8, 10, rng, 1.0 / std::sqrt(10.0))};
  BilevelConfig c;
  c.rank = 2;
  c.K = 3;
  c.constants.pairs = 30;
  c.constants.rho_pairs = 10;
  FitResult res = seqlora_fit(stream, base, c, rng);
  return res;
}

}  // namespace

TEST(AuditDescent, SyntheticTraces) {
  EXPECT_TRUE(audit_descent(trace_of({5, 4, 4, 3.5})).empty());
  EXPECT_EQ(audit_descent(trace_of({5, 4, 4.5, 3, 3.2})), (std::vector<std::size_t>{2, 4}));
  // Relative slack absorbs last-bit noise, nothing more.
  EXPECT_TRUE(audit_descent(trace_of({1.0, 1.0 + 1e-15})).empty());
  EXPECT_EQ(audit_descent(trace_of({1.0, 1.0 + 1e-9})).size(), 1u);
}

TEST(ResidualEnergy, HandComputed) {
  const Matrix sigma = Matrix::diagonal(std::vector<double>{3, 2, 1});
  EXPECT_NEAR(residual_energy(sigma, Matrix{{1}, {0}, {0}}), 3.0, 1e-14);
  EXPECT_NEAR(residual_energy(sigma, Matrix{{0}, {0}, {5}}), 5.0, 1e-14);
}

TEST(BasisStudy, DiagonalExample) {
  // Σ = diag(3,2,1), r = 1, nothing frozen: the optimum keeps e1 (residual 3)
  // and a Haar line captures Tr(Σ)/3 = 2 on average (residual 4).
  const Matrix sigma = Matrix::diagonal(std::vector<double>{3, 2, 1});
  const BasisRegistry reg(0, 3);
  Rng rng(1);
  const BasisStudy s = optimal_basis_study(sigma, reg, 1, 20000, rng);
  EXPECT_NEAR(s.optimal_residual, 3.0, 1e-12);
  EXPECT_NEAR(s.optimal_residual_direct, 3.0, 1e-12);
  EXPECT_NEAR(s.blocked_mass, 0.0, 1e-12);
  EXPECT_NEAR(s.expected_captured, 2.0, 1e-12);
  EXPECT_NEAR(s.mc_mean_residual, 4.0, 4.0 * s.mc_se_captured + 1e-12);
  EXPECT_TRUE(s.dominated);
  EXPECT_EQ(s.d_free, 3u);
}

TEST(BasisStudy, BlockedMassCountsFrozenDirections) {
  const Matrix sigma = Matrix::diagonal(std::vector<double>{3, 2, 1});
  BasisRegistry reg(0, 3);
  reg.append(Matrix{{1}, {0}, {0}});
  Rng rng(2);
  const BasisStudy s = optimal_basis_study(sigma, reg, 1, 100, rng);
  EXPECT_NEAR(s.blocked_mass, 3.0, 1e-7);
  EXPECT_NEAR(s.optimal_residual, 4.0, 1e-7);
  EXPECT_EQ(s.d_free, 2u);
  EXPECT_THROW(optimal_basis_study(sigma, reg, 3, 10, rng), CapacityError);
}

TEST(Forgetting, LastConceptHasNoForgetting) {
  const FitResult res = small_fit(3, 3);
  Rng rng(3);
  auto stream = make_linear_stream(3, 10, 8, {SpectrumSpec::geometric(0.7)}, 0.05, 0.0, rng);
  const ForgettingReport last = forgetting_decomposition(res.model, stream[2], 2);
  EXPECT_EQ(last.lhs, 0.0);
  EXPECT_EQ(last.quad_term, 0.0);
  EXPECT_EQ(last.grad_term, 0.0);
  for (std::size_t j = 0; j < 2; ++j) {
    const ForgettingReport r = forgetting_decomposition(res.model, stream[j], j);
    EXPECT_LE(r.identity_residual, 1e-8);
    EXPECT_LE(r.lhs, r.upper_bound + 1e-8);
    EXPECT_GE(r.quad_term, 0.0);
  }
}

TEST(SubGaussianNorm, KnownValues) {
  EXPECT_NEAR(subgaussian_norm(EntrySampler::gaussian), std::sqrt(8.0 / 3.0), 1e-12);
  EXPECT_NEAR(subgaussian_norm(EntrySampler::rademacher), 1.0 / std::sqrt(std::log(2.0)), 1e-12);
  // Uniform on [−√3, √3] has bounded support, so its norm sits below the Gaussian's.
  const double u = subgaussian_norm(EntrySampler::uniform);
  EXPECT_GT(u, 1.0);
  EXPECT_LT(u, std::sqrt(8.0 / 3.0));
}

TEST(HansonWright, DeviationFormula) {
  const double lg = std::log(2.0 / 0.1);
  EXPECT_DOUBLE_EQ(hw_deviation(0.1, 4.0, 1.0, 3.0, 1.0, 2.0, 1.0), std::max(2.0 * 3.0 * 2.0 * std::sqrt(lg), 4.0 * lg));
  EXPECT_DOUBLE_EQ(hw_deviation(0.1, 1.0, 2.0, 0.0, 1.0, 0.0, 3.0), 4.0 * 9.0 * lg);
  EXPECT_EQ(classify_regime(2.0, 1.0), "sub-gaussian");
  EXPECT_EQ(classify_regime(1.0, 2.0), "sub-exponential");
}

TEST(HansonWright, ZeroCrosstalkGivesZeroStatistic) {
  Rng rng(4);
  const HWReport r = hw_crosstalk_study(Matrix::identity(4), Matrix::identity(2), Matrix(4, 4), 100, {0.1, 0.01},
                                        {1.0}, rng);
  EXPECT_EQ(r.mu_z, 0.0);
  EXPECT_EQ(r.empirical_mean, 0.0);
  for (double q : r.quantiles) EXPECT_EQ(q, 0.0);
  EXPECT_TRUE(r.mean_within_3se);
}

TEST(HansonWright, MeanIdentity) {
  Rng rng(5);
  const Matrix sigma = Matrix::diagonal(std::vector<double>{4, 2, 1, 0.5});
  const Matrix c = gaussian_matrix(3, 4, rng, 0.5);
  const HWReport r = hw_crosstalk_study(sigma, Matrix::identity(3), c, 20000, {0.1, 0.05}, {0.5, 1.0, 2.0}, rng);
  const double qf = frobenius_norm(matmul(c, sqrt_spd(sigma)));
  EXPECT_NEAR(r.mu_z, 3.0 * qf * qf, 1e-10);
  EXPECT_LE(std::abs(r.empirical_mean - r.mu_z), 4.0 * r.empirical_se);
  ASSERT_EQ(r.bounds.size(), 3u);
  // Bounds grow with C1 and shrink with ξ.
  EXPECT_LT(r.bounds[0][0], r.bounds[2][0]);
  EXPECT_LT(r.bounds[1][0], r.bounds[1][1]);
  if (r.calibrated_c1) {
    for (std::size_t c1 = 0; c1 < r.c1_grid.size(); ++c1) {
      if (r.c1_grid[c1] != *r.calibrated_c1) continue;
      for (std::size_t x = 0; x < r.xi.size(); ++x) EXPECT_GE(r.mu_z + r.bounds[c1][x], r.quantiles[x]);
    }
  }
}

TEST(E2E, OutputLayerHasUnitAmplification) {
  Rng rng(6);
  const std::vector<Matrix> w0{gaussian_matrix(6, 6, rng, 0.4), gaussian_matrix(4, 6, rng, 0.4)};
  ConceptTask task =
      make_deep_task(w0, Activation::identity, std::vector<SpectrumSpec>(2, SpectrumSpec::flat()), 0.1, 32, rng);
  ComposedModel model(w0);
  std::vector<BasisRegistry> regs{BasisRegistry(0, 6), BasisRegistry(1, 6)};
  for (int j = 0; j < 2; ++j) {
    std::vector<LoRAFactorPair> pairs;
    for (std::size_t l = 0; l < 2; ++l) {
      Matrix b = frozen_feasible_basis(regs[l], 2, rng);
      regs[l].append(b);
      pairs.emplace_back(l, gaussian_matrix(w0[l].rows(), 2, rng, 0.3), b);
    }
    model.add_concept(std::move(pairs));
  }
  EXPECT_THROW(e2e_forgetting_bound(model, task, 0, 0.05, 1.0), std::invalid_argument);
  estimate_output_lipschitz(task, model.compose_all(1), 1.0, 50, rng);
  const E2EReport r = e2e_forgetting_bound(model, task, 0, 0.05, 1.0);
  ASSERT_EQ(r.gamma_prod.size(), 2u);
  EXPECT_EQ(r.gamma_prod[1], 1.0);
  EXPECT_NEAR(r.gamma_prod[0], spectral_norm(model.compose_weight(1, 2)), 1e-9);
  EXPECT_TRUE(r.holds);
  EXPECT_GT(r.empirical_forgetting, 0.0);
  EXPECT_LE(r.bound, r.hw_bound);
  // The union bound spends ξ/L per layer, so each Hanson-Wright term grows.
  EXPECT_GE(r.hw_bound, r.hw_bound_pre_union);
  EXPECT_DOUBLE_EQ(r.xi_per_layer, 0.025);
  const E2EReport last = e2e_forgetting_bound(model, task, 1, 0.05, 1.0);
  EXPECT_EQ(last.empirical_forgetting, 0.0);
  EXPECT_EQ(last.bound, 0.0);
}

TEST(Annihilation, FittedStreamsAnnihilate) {
  const FitResult res = small_fit(7, 4);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_LE(annihilation_ratio(res.model, j, 0), 1e-8);
}
