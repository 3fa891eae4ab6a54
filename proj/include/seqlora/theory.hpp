// SPDX-License-Identifier: Apache-2.0
//
// Numerical checks of the method's guarantees on fitted models: descent
// audits, the exact forgetting decomposition, optimal feasible bases versus
// random frozen ones, Hanson-Wright statistics of crosstalk and the
// end-to-end forgetting bound for deep streams.

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "seqlora/kernels.hpp"
#include "seqlora/matrix.hpp"
#include "seqlora/optimizer.hpp"
#include "seqlora/registry.hpp"
#include "seqlora/rng.hpp"
#include "seqlora/task.hpp"

namespace seqlora {

inline constexpr double kDescentSlack = 1e-12;
inline constexpr double kStationaryTolerance = 1e-6;

/// Indices k+1 with F^{(k+1)} > F^{(k)}·(1 + slack).
std::vector<std::size_t> audit_descent(const DescentTrace& trace, double slack = kDescentSlack);

/// Tr((I − P_B)Σ) with P_B the exact projector onto col(b).
double residual_energy(const Matrix& sigma, const Matrix& b);

/// ‖C_j P_{B_j}‖_F / (‖C_j‖_F‖P_{B_j}‖_F + 1e-30) at one layer.
double annihilation_ratio(const ComposedModel& model, std::size_t j, std::size_t layer);

struct ForgettingReport {
  std::size_t j = 0;
  double lhs = 0.0;          // 𝓛_j(W_T) − 𝓛_j(W_j)
  double quad_term = 0.0;    // Tr(C P⊥ Σ P⊥ Cᵀ)
  double grad_term = 0.0;    // ⟨∇𝓛_j(W_j), C⟩
  double upper_bound = 0.0;  // ‖C‖₂²·Tr(P⊥Σ) + ε_j‖C‖_F
  double residual_energy = 0.0;
  double epsilon_j = 0.0;  // ‖∇𝓛_j(W_j)‖_F
  bool stationary = false;
  double identity_residual = 0.0;  // |lhs − quad − grad| / (|lhs| + 1)
  double annihilation = 0.0;
};

/// Single-layer population tasks only; j is the 0-based concept index and
/// W_j includes concept j itself.
ForgettingReport forgetting_decomposition(const ComposedModel& model, const ConceptTask& task_j,
                                          std::size_t j);

struct BasisStudy {
  std::size_t m = 0;
  std::size_t r = 0;
  std::size_t d_free = 0;
  std::size_t trials = 0;
  Matrix sigma_tilde;
  std::vector<double> spectrum;
  double blocked_mass = 0.0;          // Tr((I − P_free)Σ)
  double optimal_residual = 0.0;      // blocked mass + Σ_{q>r} λ_q(Σ̃)
  double optimal_residual_direct = 0.0;  // Tr((I − P_opt)Σ) evaluated directly
  double optimal_captured = 0.0;
  double mc_mean_residual = 0.0;
  double mc_min_residual = 0.0;
  double mc_mean_captured = 0.0;
  double mc_se_captured = 0.0;
  double expected_captured = 0.0;  // (r/d_free)·Tr(Σ̃)
  double gap = 0.0;                // mean random residual − optimal residual
  bool dominated = false;          // optimal ≤ every sample + 1e-10
  bool mean_within_3se = false;
};

/// Throws CapacityError when r exceeds the free dimension.
BasisStudy optimal_basis_study(const Matrix& sigma, const BasisRegistry& registry, std::size_t r,
                               std::size_t mc_trials, Rng& rng,
                               kernels::Exec exec = kernels::Exec::serial);

/// Sub-Gaussian norm ‖X‖_ψ₂ = inf{t : E exp(X²/t²) ≤ 2} of one entry.
double subgaussian_norm(EntrySampler sampler);

/// max(√C₁K²‖Ψ‖_F‖QᵀQ‖_F√log(2/ξ), C₁K²‖Ψ‖₂‖Q‖₂²log(2/ξ)).
double hw_deviation(double xi, double c1, double k, double psi_fro, double psi_op, double qtq_fro,
                    double q_op);

struct HWReport {
  std::string sampler;
  std::size_t samples = 0;
  double k = 0.0;
  double mu_z = 0.0;
  double empirical_mean = 0.0;
  double empirical_se = 0.0;
  bool mean_within_3se = false;
  std::vector<double> xi;
  std::vector<double> quantiles;  // empirical (1 − ξ) quantile of z per ξ
  std::vector<double> c1_grid;
  std::vector<std::vector<double>> bounds;  // bounds[c][x] = t(xi[x], c1_grid[c])
  std::optional<double> calibrated_c1;
  double psi_fro = 0.0;
  double psi_op = 0.0;
  double qtq_fro = 0.0;
  double q_op = 0.0;
  double reff_psi = 0.0;
  double reff_qtq = 0.0;
  double regime_lhs = 0.0;  // r_eff(Ψ)·r_eff(QᵀQ)
  double regime_rhs = 0.0;  // √(C₁ log(2/ξ_min)) at the calibrated (or unit) C₁
  std::string regime;       // "sub-gaussian" or "sub-exponential"
};

std::string classify_regime(double lhs, double rhs);

/// Monte Carlo of z = ‖C X⊥‖_F² for X⊥ = (Σ⊥)^{1/2} Z Ψ^{1/2}.
HWReport hw_crosstalk_study(const Matrix& sigma_perp, const Matrix& psi, const Matrix& c,
                            std::size_t samples, const std::vector<double>& xi_list,
                            const std::vector<double>& c1_grid, Rng& rng,
                            EntrySampler sampler = EntrySampler::gaussian,
                            kernels::Exec exec = kernels::Exec::serial);

struct E2EReport {
  std::size_t j = 0;
  std::size_t layers = 0;
  double empirical_forgetting = 0.0;
  double output_lipschitz_measured = 0.0;
  double output_lipschitz = 0.0;  // analytic bound over the reachable output ball
  std::vector<double> gamma_prod;  // Γ_ℓ
  std::vector<double> delta_norms;  // ‖Δ_ℓ‖_F on the held-out batch
  std::vector<double> hw_delta;     // √(μ_z + t) per layer at ξ/L
  std::vector<double> hw_delta_pre_union;  // same at ξ
  double bound = 0.0;     // L_o Σ Γ_ℓ‖Δ_ℓ‖_F
  double hw_bound = 0.0;  // with the plugged Hanson-Wright terms at ξ/L
  double hw_bound_pre_union = 0.0;
  double xi = 0.0;
  double xi_per_layer = 0.0;
  double c1 = 0.0;
  double looseness = 0.0;  // hw_bound / empirical (0 when nothing was forgotten)
  bool holds = false;      // empirical ≤ bound and empirical ≤ hw_bound
};

/// Deep tasks with a recorded output Lipschitz estimate; throws
/// std::invalid_argument when the estimate is missing.
E2EReport e2e_forgetting_bound(const ComposedModel& model, const ConceptTask& task_j, std::size_t j,
                               double xi, double c1);

nlohmann::json to_json(const ForgettingReport& r);
nlohmann::json to_json(const BasisStudy& s);
nlohmann::json to_json(const HWReport& r);
nlohmann::json to_json(const E2EReport& r);

}  // namespace seqlora
