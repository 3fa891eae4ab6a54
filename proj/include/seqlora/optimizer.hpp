// SPDX-License-Identifier: Apache-2.0
//
// Sequential fitting of a concept stream: the constrained bilevel method,
// the alternating baseline (no cross-Hessian coupling) and the frozen random
// basis baseline. All three share step-size estimation and trace records.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "seqlora/kernels.hpp"
#include "seqlora/oracle.hpp"
#include "seqlora/registry.hpp"
#include "seqlora/rng.hpp"
#include "seqlora/task.hpp"

namespace seqlora {

enum class StepMode { theoretical, fixed };
enum class HessianPoint { outer, local };
enum class ARestart { outer, tentative };
enum class OptimizerKind { seqlora, alternating, frozen };
enum class RadiusMode { absolute, relative };

std::string to_string(OptimizerKind k);
std::string to_string(HessianPoint h);
std::string to_string(ARestart a);
std::string to_string(RadiusMode r);
OptimizerKind parse_optimizer(const std::string& s);
HessianPoint parse_hessian_point(const std::string& s);
ARestart parse_a_restart(const std::string& s);
RadiusMode parse_radius_mode(const std::string& s);

/// Secant probes for the smoothness constants.
struct ConstantsOptions {
  std::size_t pairs = 200;      // pairs for L̂ and M̂
  std::size_t rho_pairs = 200;  // pairs for ρ̂ (each needs two contractions)
  RadiusMode radius_mode = RadiusMode::relative;
  /// Ball radius: absolute, or a multiple of max(‖z‖_F, radius_floor).
  double radius = 0.1;
  double radius_floor = 1.0;
  double safety = 1.5;
  kernels::Exec exec = kernels::Exec::serial;

  bool operator==(const ConstantsOptions&) const = default;
};

struct BilevelConfig {
  std::size_t rank = 4;
  std::size_t K = 3;
  std::size_t S_B = 2;
  std::size_t S_A_prime = 2;
  StepMode alpha_mode = StepMode::theoretical;
  double alpha_value = 0.0;
  StepMode beta_mode = StepMode::theoretical;
  double beta_value = 0.0;
  double epsilon = 1e-8;
  HessianPoint hessian_point = HessianPoint::outer;
  ARestart a_restart = ARestart::outer;
  double init_scale = 0.1;
  ConstantsOptions constants;
  /// Step halvings allowed when a theoretical step fails to descend.
  std::size_t max_halvings = 30;

  void validate() const;
  bool operator==(const BilevelConfig&) const = default;
};

struct StepConstants {
  double L = 0.0;        // smoothness, with safety factor
  double L_raw = 0.0;    // max secant ratio before the safety factor
  double rho = 0.0;      // cross-Hessian Lipschitz constant
  double M = 0.0;        // bound on ‖∇_A𝓛‖
  double L_phi = 0.0;    // L(1 + αL)² + αρM
  double alpha = 0.0;    // 1/(2L)
  double beta = 0.0;     // 1/(2L_Φ)
  double radius = 0.0;   // ball radius actually used
};

/// Secant estimates around (a, b). Throws NumericalError when every probed
/// gradient difference vanishes.
StepConstants estimate_constants(const FactorObjective& obj, const Factors& a, const Factors& b,
                                 const ConstantsOptions& opts, Rng& rng);
/// L_Φ formula with α = 1/(2L) and the resulting β.
StepConstants finish_constants(double l_raw, double rho, double m_hat, double safety);

struct TraceRecord {
  std::size_t iteration = 0;
  double objective = 0.0;
  bool feasible = true;
  double grad_a_norm = 0.0;
  double reduced_grad_b_norm = 0.0;  // ‖P⊥∇_BΦ‖_F
  // Step sizes applied from this iterate; the last record carries the ones
  // that would be applied next.
  double alpha = 0.0;
  double beta = 0.0;
  double L_hat = 0.0;
  double L_phi_hat = 0.0;
  double feasibility_defect = 0.0;  // max over layers of ‖B_intᵀB‖_F / ‖B‖_F
  double wall_ms = 0.0;
  std::size_t halvings = 0;
};

struct DescentTrace {
  std::size_t concept_index = 0;
  OptimizerKind optimizer = OptimizerKind::seqlora;
  std::vector<TraceRecord> records;  // K + 1 records, the first one at initialization
  std::vector<std::string> events;
};

struct FitResult {
  ComposedModel model;
  std::vector<BasisRegistry> registries;  // one per layer
  std::vector<DescentTrace> traces;       // one per concept
};

/// Fits concepts in order, each on the composed weights of its predecessors,
/// freezing and registering its bases afterwards.
FitResult fit_stream(OptimizerKind kind, const std::vector<ConceptTask>& stream,
                     const std::vector<Matrix>& base_weights, const BilevelConfig& cfg, Rng& rng);

FitResult seqlora_fit(const std::vector<ConceptTask>& stream, const std::vector<Matrix>& base_weights,
                      const BilevelConfig& cfg, Rng& rng);
FitResult alternating_fit(const std::vector<ConceptTask>& stream, const std::vector<Matrix>& base_weights,
                          const BilevelConfig& cfg, Rng& rng);
FitResult frozen_basis_fit(const std::vector<ConceptTask>& stream, const std::vector<Matrix>& base_weights,
                           const BilevelConfig& cfg, Rng& rng);

/// Result of fitting one concept against fixed registries.
struct ConceptFit {
  Factors a;
  Factors b;
  DescentTrace trace;
};

/// One concept of the bilevel (or alternating) method against fixed registries.
ConceptFit fit_concept_bilevel(const FactorObjective& obj, const std::vector<BasisRegistry>& registries,
                               const Factors& a0, const Factors& b0, const BilevelConfig& cfg,
                               bool coupled, Rng& rng);
/// A-only descent with frozen b.
ConceptFit fit_concept_frozen(const FactorObjective& obj, const std::vector<BasisRegistry>& registries,
                              const Factors& a0, const Factors& b, const BilevelConfig& cfg, Rng& rng);

/// Initial factors: A ~ N(0, s²/n), B ~ N(0, s²/m), B projected feasible.
std::pair<Factors, Factors> initial_factors(const std::vector<Matrix>& base_weights,
                                            const std::vector<BasisRegistry>& registries,
                                            std::size_t rank, double init_scale, Rng& rng);

/// Haar frame projected into the free complement and re-orthonormalized.
Matrix frozen_feasible_basis(const BasisRegistry& registry, std::size_t rank, Rng& rng);

/// Rewrites (a, b) as (a·Rᵀ, Q) for b = QR, leaving a·bᵀ and col(b) intact.
/// Frozen bases then have unit scale, so the ε-regularized projector of
/// later concepts leaks O(ε) instead of O(ε/σ_min(b)²).
void canonical_gauge(Matrix& a, Matrix& b);

/// max over layers of ‖B_intᵀB‖_F / ‖B‖_F.
double feasibility_defect(const std::vector<BasisRegistry>& registries, const Factors& b);

}  // namespace seqlora
