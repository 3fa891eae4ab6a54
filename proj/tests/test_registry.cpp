// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "seqlora/linalg.hpp"
#include "seqlora/registry.hpp"

using namespace seqlora;

TEST(Registry, EmptyRegistryProjectsToIdentity) {
  const BasisRegistry reg(0, 5);
  EXPECT_EQ(reg.projector(), Matrix::identity(5));
  Rng rng(1);
  const Matrix b = gaussian_matrix(5, 2, rng);
  EXPECT_EQ(reg.project(b), b);
  EXPECT_EQ(reg.free_dim(), 5u);
}

TEST(Registry, ProjectorIsIdempotentAndAnnihilatesBases) {
  Rng rng(2);
  const Matrix f = haar_frame(10, 5, rng);
  BasisRegistry reg(0, 10, 0.0);
  reg.append(f.columns(0, 2));
  reg.append(3.0 * f.columns(2, 3));
  const Matrix& p = reg.projector();
  EXPECT_LT(max_abs_diff(matmul(p, p), p), 1e-13);
  EXPECT_LT(max_abs(matmul(p, reg.concatenated())), 1e-13);
  EXPECT_LT(max_abs_diff(p, reg.exact_complement_projector()), 1e-13);
  EXPECT_EQ(reg.used_rank(), 5u);
  EXPECT_EQ(reg.free_dim(), 5u);
}

TEST(Registry, RegularizedProjectorLeaksOrderEpsilon) {
  Rng rng(3);
  BasisRegistry reg(0, 8, 1e-8);
  reg.append(haar_frame(8, 2, rng));
  const Matrix b = reg.project(gaussian_matrix(8, 2, rng));
  EXPECT_LT(reg.orthogonality_defect(b), 1e-7);
}

TEST(Registry, RejectsNonOrthogonalAndOverCapacity) {
  Rng rng(4);
  BasisRegistry reg(0, 4);
  const Matrix f = haar_frame(4, 4, rng);
  reg.append(f.columns(0, 3));
  EXPECT_THROW(reg.append(f.columns(2, 1)), OrthogonalityError);
  EXPECT_THROW(reg.append(gaussian_matrix(4, 2, rng)), CapacityError);
  EXPECT_THROW(reg.append(Matrix(5, 1, 1.0)), DimensionError);
  EXPECT_NO_THROW(reg.append(f.columns(3, 1)));
}

TEST(Registry, FunctionalAppendLeavesOriginal) {
  Rng rng(5);
  const BasisRegistry a(0, 6);
  const BasisRegistry b = append_basis(a, haar_frame(6, 2, rng));
  EXPECT_TRUE(a.empty());
  EXPECT_EQ(b.size(), 1u);
  EXPECT_EQ(build_projector(b), b.projector());
}

TEST(ComposedModel, ComposeAndCrosstalk) {
  const Matrix w0 = Matrix::identity(3);
  ComposedModel model({w0});
  const Matrix a1{{1}, {0}, {0}}, b1{{0}, {1}, {0}};
  const Matrix a2{{0}, {2}, {0}}, b2{{0}, {0}, {1}};
  model.add_concept({LoRAFactorPair(0, a1, b1)});
  model.add_concept({LoRAFactorPair(0, a2, b2)});
  EXPECT_EQ(model.compose_weight(0, 0), w0);
  EXPECT_EQ(model.compose_weight(0, 2), w0 + matmul_nt(a1, b1) + matmul_nt(a2, b2));
  EXPECT_EQ(model.crosstalk_operator(0, 0), matmul_nt(a2, b2));
  EXPECT_EQ(model.crosstalk_operator(1, 0), Matrix(3, 3));
  EXPECT_THROW(model.crosstalk_operator(2, 0), std::out_of_range);
  EXPECT_THROW(model.add_concept({LoRAFactorPair(0, Matrix(2, 1), Matrix(3, 1))}), DimensionError);
}

TEST(LoRAFactorPair, RankValidation) {
  EXPECT_THROW(LoRAFactorPair(0, Matrix(3, 2), Matrix(3, 1)), DimensionError);
  EXPECT_THROW(LoRAFactorPair(0, Matrix(3, 0), Matrix(3, 0)), DimensionError);
  const LoRAFactorPair p(0, Matrix{{1}, {2}}, Matrix{{3}, {4}});
  EXPECT_EQ(p.residual(), (Matrix{{3, 4}, {6, 8}}));
}
