// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "seqlora/linalg.hpp"
#include "seqlora/task.hpp"

using namespace seqlora;

TEST(Spectrum, Profiles) {
  EXPECT_EQ(SpectrumSpec::flat(2.0).eigenvalues(3), (std::vector<double>{2, 2, 2}));
  EXPECT_EQ(SpectrumSpec::geometric(0.5).eigenvalues(3), (std::vector<double>{1, 0.5, 0.25}));
  EXPECT_EQ(SpectrumSpec::spiked(2, 10.0).eigenvalues(4), (std::vector<double>{10, 10, 1, 1}));
  EXPECT_EQ(SpectrumSpec::from_values({3, 1}).eigenvalues(2), (std::vector<double>{3, 1}));
  EXPECT_THROW(SpectrumSpec::from_values({1, 3}).eigenvalues(2), std::invalid_argument);
  EXPECT_THROW(SpectrumSpec::from_values({1}).eigenvalues(2), std::invalid_argument);
  EXPECT_THROW(SpectrumSpec::spiked(5, 10.0).eigenvalues(4), std::invalid_argument);
  EXPECT_THROW(SpectrumSpec::geometric(1.5).eigenvalues(4), std::invalid_argument);
}

TEST(Spectrum, Names) {
  for (auto p : {SpectrumSpec::Profile::flat, SpectrumSpec::Profile::geometric, SpectrumSpec::Profile::spiked,
                 SpectrumSpec::Profile::values})
    EXPECT_EQ(parse_spectrum_profile(to_string(p)), p);
  EXPECT_EQ(parse_task_kind("deep"), TaskKind::deep);
  EXPECT_THROW(parse_activation("relu"), std::invalid_argument);
}

TEST(Task, CovarianceHasRequestedSpectrum) {
  Rng rng(3);
  const ConceptTask t = make_linear_task(6, 4, SpectrumSpec::geometric(0.6), 0.1, rng);
  const SymEig e = sym_eig(t.sigma);
  const auto lam = SpectrumSpec::geometric(0.6).eigenvalues(6);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(e.values[i], lam[i], 1e-12);
  EXPECT_LT(max_abs_diff(matmul(t.sigma_sqrt, t.sigma_sqrt), t.sigma), 1e-12);
  EXPECT_EQ(t.target.front().rows(), 4u);
  EXPECT_EQ(t.target.front().cols(), 6u);
}

TEST(Task, RotationSeedFixesEigenbasis) {
  SpectrumSpec s = SpectrumSpec::geometric(0.5);
  s.rotation_seed = 99;
  Rng r1(1), r2(2);
  EXPECT_EQ(make_linear_task(5, 5, s, 0.0, r1).sigma, make_linear_task(5, 5, s, 0.0, r2).sigma);
}

TEST(Task, PopulationLossClosedForm) {
  Rng rng(4);
  const ConceptTask t = make_linear_task(5, 3, SpectrumSpec::flat(2.0), 0.5, rng);
  EXPECT_NEAR(population_loss(t, t.target.front()), 0.25 * 3, 1e-14);
  // With Σ = 2I, the excess risk is 2‖W − W*‖².
  const Matrix w = t.target.front() + Matrix(3, 5, 0.1);
  EXPECT_NEAR(population_loss(t, w), 2.0 * 15 * 0.01 + 0.75, 1e-12);
}

TEST(Task, SampledLossApproachesPopulation) {
  Rng rng(5);
  ConceptTask t = make_linear_task(4, 3, SpectrumSpec::geometric(0.5), 0.1, rng);
  t = attach_batch(std::move(t), 40000, rng);
  EXPECT_EQ(t.kind, TaskKind::linear_sampled);
  const Matrix w(3, 4);
  const double pop = population_loss(t, w);
  EXPECT_NEAR(sampled_loss(w, t.x, t.y), pop, 0.03 * pop);
}

TEST(Task, StreamMixing) {
  Rng r1(6);
  const auto ind = make_linear_stream(3, 8, 8, {SpectrumSpec::flat()}, 0.0, 0.0, r1);
  Rng r2(6);
  const auto same = make_linear_stream(3, 8, 8, {SpectrumSpec::flat()}, 0.0, 1.0, r2);
  EXPECT_EQ(ind.size(), 3u);
  EXPECT_LT(max_abs_diff(same[0].target[0], same[2].target[0]), 1e-15);
  EXPECT_GT(max_abs_diff(ind[0].target[0], ind[2].target[0]), 1e-3);
}

TEST(Task, DeepNetworkForward) {
  Rng rng(7);
  const std::vector<Matrix> w0{gaussian_matrix(6, 6, rng, 0.4), gaussian_matrix(6, 6, rng, 0.4),
                               gaussian_matrix(3, 6, rng, 0.4)};
  const ConceptTask t = make_deep_task(w0, Activation::tanh, std::vector<SpectrumSpec>(3, SpectrumSpec::flat()), 0.0, 32, rng);
  EXPECT_EQ(t.layers(), 3u);
  EXPECT_EQ(t.x.cols(), 32u);
  EXPECT_EQ(t.x_holdout.cols(), 32u);
  // Zero noise: the teacher fits its own batch.
  EXPECT_NEAR(deep_loss(t.target, t.activation, t.x, t.y), 0.0, 1e-20);
  const auto h = forward_activations(w0, Activation::tanh, t.x);
  ASSERT_EQ(h.size(), 4u);
  EXPECT_EQ(h.back(), network_output(w0, Activation::tanh, t.x));
  for (double v : h[1].data()) EXPECT_LE(std::abs(v), 1.0);
}

TEST(Task, OutputLipschitzEstimateIsStored) {
  Rng rng(8);
  const std::vector<Matrix> w0{gaussian_matrix(4, 4, rng, 0.5), gaussian_matrix(2, 4, rng, 0.5)};
  ConceptTask t = make_deep_task(w0, Activation::tanh, std::vector<SpectrumSpec>(2, SpectrumSpec::flat()), 0.1, 16, rng);
  const double l = estimate_output_lipschitz(t, w0, 0.5, 100, rng);
  ASSERT_TRUE(t.output_lipschitz.has_value());
  EXPECT_EQ(*t.output_lipschitz, l);
  EXPECT_GT(l, 0.0);
}
