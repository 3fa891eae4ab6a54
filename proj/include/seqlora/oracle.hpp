// SPDX-License-Identifier: Apache-2.0
//
// Loss, factor gradients and the cross-Hessian contraction
//   𝓗_AB[G] = ∇_B ⟨G, ∇_A𝓛(A₀, B)⟩
// for every task kind, plus the finite-difference validators that certify
// the closed forms.

#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "seqlora/matrix.hpp"
#include "seqlora/task.hpp"

namespace seqlora {

/// One matrix per layer.
using Factors = std::vector<Matrix>;

struct GradPair {
  Matrix grad_a;  // n×r
  Matrix grad_b;  // m×r
  double loss = 0.0;
};

struct Evaluation {
  double loss = 0.0;
  Factors grad_a;
  Factors grad_b;
};

/// A loss over per-layer LoRA factors. Subclasses supply evaluate(); the
/// cross-Hessian defaults to per-entry central differences of the scalar
/// φ(B) = Σ_ℓ ⟨G_ℓ, ∇_{A_ℓ}𝓛(A₀, B)⟩.
class FactorObjective {
 public:
  virtual ~FactorObjective() = default;

  virtual std::size_t layers() const = 0;
  virtual Evaluation evaluate(const Factors& a, const Factors& b) const = 0;
  virtual double loss(const Factors& a, const Factors& b) const { return evaluate(a, b).loss; }
  /// Gradients only; `loss` may be left unset.
  virtual Evaluation gradients(const Factors& a, const Factors& b) const { return evaluate(a, b); }

  /// 𝓗_AB[g_a] at (a0, b); B-shaped.
  virtual Factors cross_hessian(const Factors& a0, const Factors& b, const Factors& g_a) const;
  /// 𝓗_BA[v] = ∇_A ⟨V, ∇_B𝓛(A, B₀)⟩ at (a, b0); A-shaped.
  virtual Factors cross_hessian_transposed(const Factors& a, const Factors& b0, const Factors& v) const;

  double fd_step = 1e-5;
};

/// Objective of one concept starting from fixed base weights. Linear kinds
/// use closed forms; deep tasks use backpropagation and the finite-difference
/// cross-Hessian.
class TaskObjective final : public FactorObjective {
 public:
  /// `task` must outlive the objective.
  TaskObjective(const ConceptTask& task, std::vector<Matrix> base_weights);

  std::size_t layers() const override { return base_.size(); }
  Evaluation evaluate(const Factors& a, const Factors& b) const override;
  double loss(const Factors& a, const Factors& b) const override;
  Evaluation gradients(const Factors& a, const Factors& b) const override;
  Factors cross_hessian(const Factors& a0, const Factors& b, const Factors& g_a) const override;
  Factors cross_hessian_transposed(const Factors& a, const Factors& b0, const Factors& v) const override;

  const ConceptTask& task() const noexcept { return *task_; }
  const std::vector<Matrix>& base_weights() const noexcept { return base_; }
  std::vector<Matrix> compose(const Factors& a, const Factors& b) const;

  /// Loss and dense weight gradients ∂𝓛/∂W_ℓ at explicit weights.
  double weight_loss(const std::vector<Matrix>& w) const;
  std::vector<Matrix> weight_gradient(const std::vector<Matrix>& w, double* loss_out = nullptr) const;

 private:
  bool linear() const noexcept { return task_->kind != TaskKind::deep; }
  void check_shapes(const Factors& a, const Factors& b) const;

  const ConceptTask* task_;
  std::vector<Matrix> base_;
  // Linear kinds: 𝓛(W) = Tr(W S Wᵀ) − 2⟨W, K⟩ + const, so ∇_W = 2(W S − K);
  // ds_ = W₀S − K is the base residual–covariance product.
  Matrix s_;
  Matrix ds_;
};

// Single-layer convenience wrappers over TaskObjective.
GradPair loss_and_grads(const ConceptTask& task, const Matrix& w0, const Matrix& a, const Matrix& b);
Matrix cross_hessian_contract(const ConceptTask& task, const Matrix& w0, const Matrix& a0,
                              const Matrix& b, const Matrix& g_a);
Matrix cross_hessian_transposed(const ConceptTask& task, const Matrix& w0, const Matrix& a,
                                const Matrix& b0, const Matrix& v);

/// ∇_BΦ at b for Φ(B) = 𝓛(A_k − α∇_A𝓛(A_k, B), B):
///   ∇_B𝓛(Ã, B) − α·𝓗_AB[g_a_at_updated] with the Hessian at (A_k, B).
Matrix reduced_gradient(const ConceptTask& task, const Matrix& w0, const Matrix& a_k, const Matrix& b,
                        const Matrix& g_a_at_updated, double alpha);

/// Direction used inside the bilevel B-loop: gradients at (a_tilde, b), the
/// contraction evaluated at (a_k, b_hess).
struct ReducedStep {
  Factors direction;  // g_B − α𝓗_AB[g_A]
  Factors g_a;
  Factors g_b;
  double loss = 0.0;
};
ReducedStep reduced_direction(const FactorObjective& obj, const Factors& a_tilde, const Factors& b,
                              const Factors& a_k, const Factors& b_hess, double alpha);

/// Reduced objective Φ(B) for validators.
double reduced_objective(const FactorObjective& obj, const Factors& a_k, const Factors& b, double alpha);

/// Central-difference gradient of a scalar function of a matrix.
Matrix fd_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x, double h = 1e-5);

/// Contraction by per-entry central differences on any objective.
Factors fd_cross_hessian(const FactorObjective& obj, const Factors& a0, const Factors& b,
                         const Factors& g_a, double h = 1e-5);
Factors fd_cross_hessian_transposed(const FactorObjective& obj, const Factors& a, const Factors& b0,
                                    const Factors& v, double h = 1e-5);

/// ‖a − b‖_F / max(‖b‖_F, floor).
double relative_error(const Matrix& a, const Matrix& b, double floor = 1e-300);
double relative_error(const Factors& a, const Factors& b, double floor = 1e-300);

// Layer-wise helpers on Factors.
double frobenius_norm(const Factors& f);
double frobenius_dot(const Factors& a, const Factors& b);
Factors axpy(const Factors& x, double alpha, const Factors& y);  // x + α·y
Factors scaled(const Factors& x, double alpha);

}  // namespace seqlora
