// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "seqlora/linalg.hpp"
#include "seqlora/matrix.hpp"
#include "seqlora/rng.hpp"

using namespace seqlora;

TEST(Matrix, ProductsAgainstHandComputed) {
  const Matrix a{{1, 2}, {3, 4}, {5, 6}};
  const Matrix b{{7, 8, 9}, {10, 11, 12}};
  const Matrix c = matmul(a, b);
  EXPECT_EQ(c, (Matrix{{27, 30, 33}, {61, 68, 75}, {95, 106, 117}}));
  EXPECT_EQ(matmul_tn(a, a), matmul(a.transpose(), a));
  EXPECT_EQ(matmul_nt(b.transpose(), b.transpose()), matmul(b.transpose(), b));
}

TEST(Matrix, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), DimensionError);
  Matrix a(2, 2);
  EXPECT_THROW(a += Matrix(3, 2), DimensionError);
}

TEST(Matrix, NormsAndTrace) {
  const Matrix a{{3, 0}, {4, 0}};
  EXPECT_DOUBLE_EQ(frobenius_norm(a), 5.0);
  EXPECT_DOUBLE_EQ(trace(Matrix{{1, 9}, {9, 2}}), 3.0);
  EXPECT_DOUBLE_EQ(frobenius_dot(a, a), 25.0);
  EXPECT_DOUBLE_EQ(max_abs_diff(a, Matrix(2, 2)), 4.0);
  EXPECT_TRUE(all_finite(a));
  EXPECT_FALSE(all_finite(Matrix{{NAN}}));
}

TEST(Matrix, ColumnsAndConcat) {
  const Matrix a{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(a.columns(1, 2), (Matrix{{2, 3}, {5, 6}}));
  EXPECT_EQ(hconcat(a.column(0), a.columns(1, 2)), a);
}

TEST(Linalg, SymEigRecoversDiagonal) {
  Rng rng(3);
  const Matrix q = haar_frame(6, 6, rng);
  const std::vector<double> lam{6, 5, 4, 3, 2, 1};
  const Matrix m = matmul(matmul(q, Matrix::diagonal(lam)), q.transpose());
  const SymEig e = sym_eig(m);
  for (std::size_t i = 0; i < lam.size(); ++i) EXPECT_NEAR(e.values[i], lam[i], 1e-12);
  const Matrix back = matmul(matmul(e.vectors, Matrix::diagonal(e.values)), e.vectors.transpose());
  EXPECT_LT(max_abs_diff(back, m), 1e-12);
}

TEST(Linalg, CholeskySolve) {
  const Matrix m{{4, 2}, {2, 3}};
  const Matrix x = spd_solve(m, Matrix{{2}, {1}});
  EXPECT_LT(max_abs_diff(matmul(m, x), Matrix{{2}, {1}}), 1e-14);
  EXPECT_THROW(spd_solve(Matrix{{1, 2}, {2, 1}}, Matrix{{1}, {1}}), NumericalError);
}

TEST(Linalg, QrSignConventionAndReconstruction) {
  Rng rng(5);
  const Matrix a = gaussian_matrix(7, 3, rng);
  const QR qr = householder_qr(a);
  EXPECT_LT(max_abs_diff(matmul(qr.q, qr.r), a), 1e-13);
  EXPECT_LT(max_abs_diff(matmul_tn(qr.q, qr.q), Matrix::identity(3)), 1e-14);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_GE(qr.r(i, i), 0.0);
    for (std::size_t j = 0; j < i; ++j) EXPECT_EQ(qr.r(i, j), 0.0);
  }
}

TEST(Linalg, SpectralNormAndSqrt) {
  const Matrix d = Matrix::diagonal(std::vector<double>{9, 4, 1});
  EXPECT_NEAR(spectral_norm(d), 9.0, 1e-10);
  EXPECT_LT(max_abs_diff(sqrt_spd(d), Matrix::diagonal(std::vector<double>{3, 2, 1})), 1e-13);
  EXPECT_THROW(sqrt_spd(Matrix::diagonal(std::vector<double>{1, -1})), NumericalError);
}

TEST(Linalg, HaarFrameOrthonormal) {
  Rng rng(11);
  const Matrix f = haar_frame(10, 4, rng);
  EXPECT_LT(max_abs_diff(matmul_tn(f, f), Matrix::identity(4)), 1e-14);
  const Matrix p = projector_from_orthonormal(f);
  EXPECT_LT(max_abs_diff(matmul(p, p), p), 1e-14);
  EXPECT_NEAR(trace(p), 4.0, 1e-13);
  EXPECT_LT(max_abs_diff(column_space_projector(matmul(f, Matrix{{2, 1, 0, 0}, {0, 1, 0, 0}, {0, 0, 3, 0}, {0, 0, 0, 1}})), p),
            1e-12);
}

TEST(Rng, SplitIsDeterministicAndIndependentOfParent) {
  Rng a(42);
  const Rng child = a.split(7);
  a.next_u64();
  EXPECT_EQ(a.split(7).key(), child.key());
  Rng c1 = child, c2 = child;
  for (int i = 0; i < 10; ++i) EXPECT_EQ(c1.next_u64(), c2.next_u64());
  EXPECT_NE(Rng(42).split(1).key(), Rng(42).split(2).key());
}

TEST(Rng, SamplerMoments) {
  Rng rng(1);
  for (EntrySampler s : {EntrySampler::gaussian, EntrySampler::rademacher, EntrySampler::uniform}) {
    const Matrix m = sample_matrix(200, 200, rng, s);
    double mean = 0.0, sq = 0.0;
    for (double v : m.data()) {
      mean += v;
      sq += v * v;
    }
    mean /= static_cast<double>(m.size());
    sq /= static_cast<double>(m.size());
    EXPECT_NEAR(mean, 0.0, 0.02);
    EXPECT_NEAR(sq, 1.0, 0.02);
  }
}
