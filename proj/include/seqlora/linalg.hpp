// SPDX-License-Identifier: Apache-2.0
//
// Factorizations and structured random matrices on top of Matrix. Sized for
// desk-scale problems (dimensions up to a few hundred).

#pragma once

#include <cstddef>
#include <vector>

#include "seqlora/matrix.hpp"
#include "seqlora/rng.hpp"

namespace seqlora {

/// Eigenpairs of a symmetric matrix, values descending, vectors as columns.
struct SymEig {
  std::vector<double> values;
  Matrix vectors;
};

/// Cyclic Jacobi eigendecomposition. The input is symmetrized first; callers
/// should compare eigenspaces (projectors), not individual vectors, when
/// eigenvalues are tied.
SymEig sym_eig(const Matrix& m);

/// Solves m·x = rhs for symmetric positive definite m via Cholesky.
/// Throws NumericalError on a non-positive pivot.
Matrix spd_solve(const Matrix& m, const Matrix& rhs);

/// Lower Cholesky factor of an SPD matrix.
Matrix cholesky(const Matrix& m);

struct PowerIteration {
  double value = 0.0;
  std::vector<double> history;
};

/// Largest singular value by power iteration on mᵀm; stops once the relative
/// change of the estimate drops below tol.
PowerIteration power_iteration(const Matrix& m, std::size_t iters = 5000, double tol = 1e-13);
double spectral_norm(const Matrix& m, std::size_t iters = 5000, double tol = 1e-13);

/// Symmetric square root of a PSD matrix. Eigenvalues in [−1e-12·‖m‖₂, 0) are
/// clamped to zero; anything more negative throws NumericalError.
Matrix sqrt_spd(const Matrix& m);

struct QR {
  Matrix q;  // rows×cols, orthonormal columns
  Matrix r;  // cols×cols, upper triangular with non-negative diagonal
};

/// Thin Householder QR with the sign convention diag(r) ≥ 0.
QR householder_qr(const Matrix& a);

/// Orthonormal basis of col(a) (thin Q factor).
Matrix orthonormalize(const Matrix& a);

/// m×r frame with orthonormal columns, Haar distributed: QR of a standard
/// Gaussian matrix with the R diagonal made positive.
Matrix haar_frame(std::size_t m, std::size_t r, Rng& rng);

/// Projector onto the span of the (assumed orthonormal) columns of q.
Matrix projector_from_orthonormal(const Matrix& q);

/// Projector onto col(b) built through the Gram inverse b (bᵀb)⁻¹ bᵀ.
Matrix column_space_projector(const Matrix& b);

/// σ_max / σ_min of b (via eigenvalues of bᵀb).
double condition_number(const Matrix& b);

}  // namespace seqlora
