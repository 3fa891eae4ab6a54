// SPDX-License-Identifier: Apache-2.0

#include "seqlora/optimizer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <fmt/format.h>

#include "seqlora/linalg.hpp"

namespace seqlora {

std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::seqlora: return "seqlora";
    case OptimizerKind::alternating: return "alternating";
    case OptimizerKind::frozen: return "frozen";
  }
  return "?";
}
std::string to_string(HessianPoint h) { return h == HessianPoint::outer ? "outer" : "local"; }
std::string to_string(ARestart a) { return a == ARestart::outer ? "outer" : "tentative"; }
std::string to_string(RadiusMode r) { return r == RadiusMode::absolute ? "absolute" : "relative"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "seqlora") return OptimizerKind::seqlora;
  if (s == "alternating") return OptimizerKind::alternating;
  if (s == "frozen") return OptimizerKind::frozen;
  throw std::invalid_argument(fmt::format("unknown optimizer '{}' (expected seqlora, alternating or frozen)", s));
}
HessianPoint parse_hessian_point(const std::string& s) {
  if (s == "outer") return HessianPoint::outer;
  if (s == "local") return HessianPoint::local;
  throw std::invalid_argument(fmt::format("unknown hessian_point '{}' (expected outer or local)", s));
}
ARestart parse_a_restart(const std::string& s) {
  if (s == "outer") return ARestart::outer;
  if (s == "tentative") return ARestart::tentative;
  throw std::invalid_argument(fmt::format("unknown a_restart '{}' (expected outer or tentative)", s));
}
RadiusMode parse_radius_mode(const std::string& s) {
  if (s == "absolute") return RadiusMode::absolute;
  if (s == "relative") return RadiusMode::relative;
  throw std::invalid_argument(fmt::format("unknown radius_mode '{}' (expected absolute or relative)", s));
}

void BilevelConfig::validate() const {
  if (rank == 0) throw std::invalid_argument("rank must be >= 1");
  if (K == 0 || S_B == 0 || S_A_prime == 0) throw std::invalid_argument("K, S_B and S_A_prime must be >= 1");
  if (!(epsilon >= 0.0)) throw std::invalid_argument("epsilon must be >= 0");
  if (!(init_scale > 0.0)) throw std::invalid_argument("init_scale must be > 0");
  if (alpha_mode == StepMode::fixed && !(alpha_value > 0.0)) throw std::invalid_argument("fixed alpha must be > 0");
  if (beta_mode == StepMode::fixed && !(beta_value > 0.0)) throw std::invalid_argument("fixed beta must be > 0");
  if (constants.pairs == 0) throw std::invalid_argument("constants.pairs must be >= 1");
  if (!(constants.radius > 0.0)) throw std::invalid_argument("constants.radius must be > 0");
  if (!(constants.safety >= 1.0)) throw std::invalid_argument("constants.safety must be >= 1");
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

Factors random_direction(const Factors& like, Rng& rng) {
  Factors d;
  for (const Matrix& m : like) d.push_back(gaussian_matrix(m.rows(), m.cols(), rng));
  const double n = frobenius_norm(d);
  return n > 0.0 ? scaled(d, 1.0 / n) : d;
}

// Point in the ball of radius r around z: z + r·u·(unit direction).
Factors ball_point(const Factors& z, double radius, Rng& rng) {
  const Factors d = random_direction(z, rng);
  return axpy(z, radius * rng.uniform(), d);
}

Factors join(const Factors& a, const Factors& b) {
  Factors out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

struct Probe {
  double ratio = 0.0;
  double grad_a = 0.0;
};

// Secant ratio of the joint gradient between two points. `layer` restricts
// the perturbation to one layer (npos = all layers).
Probe secant_probe(const FactorObjective& obj, const Factors& a, const Factors& b, double radius,
                   std::size_t layer, Rng& rng) {
  Factors a1 = a, b1 = b, a2 = a, b2 = b;
  if (layer == static_cast<std::size_t>(-1)) {
    const Factors z = join(a, b);
    const Factors p1 = ball_point(z, radius, rng);
    const Factors p2 = ball_point(z, radius, rng);
    const std::size_t L = a.size();
    for (std::size_t l = 0; l < L; ++l) {
      a1[l] = p1[l];
      b1[l] = p1[L + l];
      a2[l] = p2[l];
      b2[l] = p2[L + l];
    }
  } else {
    const Factors z{a[layer], b[layer]};
    const Factors p1 = ball_point(z, radius, rng);
    const Factors p2 = ball_point(z, radius, rng);
    a1[layer] = p1[0];
    b1[layer] = p1[1];
    a2[layer] = p2[0];
    b2[layer] = p2[1];
  }
  const Evaluation e1 = obj.gradients(a1, b1);
  const Evaluation e2 = obj.gradients(a2, b2);
  const double dz = std::sqrt(std::pow(frobenius_norm(axpy(a1, -1.0, a2)), 2) +
                              std::pow(frobenius_norm(axpy(b1, -1.0, b2)), 2));
  const double dg = std::sqrt(std::pow(frobenius_norm(axpy(e1.grad_a, -1.0, e2.grad_a)), 2) +
                              std::pow(frobenius_norm(axpy(e1.grad_b, -1.0, e2.grad_b)), 2));
  Probe p;
  p.ratio = dz > 0.0 ? dg / dz : 0.0;
  p.grad_a = std::max(frobenius_norm(e1.grad_a), frobenius_norm(e2.grad_a));
  return p;
}

double rho_probe(const FactorObjective& obj, const Factors& a, const Factors& b, double radius, Rng& rng) {
  const Factors z = join(a, b);
  const Factors p1 = ball_point(z, radius, rng);
  const Factors p2 = ball_point(z, radius, rng);
  const Factors g = random_direction(a, rng);
  const std::size_t L = a.size();
  Factors a1(p1.begin(), p1.begin() + L), b1(p1.begin() + L, p1.end());
  Factors a2(p2.begin(), p2.begin() + L), b2(p2.begin() + L, p2.end());
  const Factors h1 = obj.cross_hessian(a1, b1, g);
  const Factors h2 = obj.cross_hessian(a2, b2, g);
  const double dz = frobenius_norm(axpy(p1, -1.0, p2));
  return dz > 0.0 ? frobenius_norm(axpy(h1, -1.0, h2)) / dz : 0.0;
}

}  // namespace

StepConstants finish_constants(double l_raw, double rho, double m_hat, double safety) {
  StepConstants c;
  c.L_raw = l_raw;
  c.L = safety * l_raw;
  c.rho = safety * rho;
  c.M = safety * m_hat;
  c.alpha = 1.0 / (2.0 * c.L);
  const double t = 1.0 + c.alpha * c.L;
  c.L_phi = c.L * t * t + c.alpha * c.rho * c.M;
  c.beta = 1.0 / (2.0 * c.L_phi);
  return c;
}

StepConstants estimate_constants(const FactorObjective& obj, const Factors& a, const Factors& b,
                                 const ConstantsOptions& opts, Rng& rng) {
  const double znorm = std::hypot(frobenius_norm(a), frobenius_norm(b));
  const double radius = opts.radius_mode == RadiusMode::absolute
                            ? opts.radius
                            : opts.radius * std::max(znorm, opts.radius_floor);
  const std::size_t L = obj.layers();
  // Joint probes first, then per-layer probes for multi-layer objectives; the
  // largest ratio governs the shared step sizes.
  const std::size_t groups = L > 1 ? L + 1 : 1;
  const std::size_t total = groups * opts.pairs;
  std::vector<Rng> rngs;
  rngs.reserve(total + opts.rho_pairs);
  for (std::size_t i = 0; i < total + opts.rho_pairs; ++i) rngs.push_back(rng.split(i));
  rng.next_u64();

  std::vector<Probe> probes(total);
  kernels::for_each_index(total, opts.exec, [&](std::size_t i) {
    const std::size_t group = i / opts.pairs;
    const std::size_t layer = group == 0 ? static_cast<std::size_t>(-1) : group - 1;
    probes[i] = secant_probe(obj, a, b, radius, layer, rngs[i]);
  });
  std::vector<double> rhos(opts.rho_pairs, 0.0);
  kernels::for_each_index(opts.rho_pairs, opts.exec,
                          [&](std::size_t i) { rhos[i] = rho_probe(obj, a, b, radius, rngs[total + i]); });

  double l_raw = 0.0;
  double m_hat = frobenius_norm(obj.gradients(a, b).grad_a);
  for (const Probe& p : probes) {
    l_raw = std::max(l_raw, p.ratio);
    m_hat = std::max(m_hat, p.grad_a);
  }
  double rho = 0.0;
  for (double r : rhos) rho = std::max(rho, r);
  if (!(l_raw > 0.0) || !std::isfinite(l_raw)) {
    throw NumericalError(fmt::format("smoothness estimate is {} (degenerate or all-zero task)", l_raw));
  }
  StepConstants c = finish_constants(l_raw, rho, m_hat, opts.safety);
  c.radius = radius;
  return c;
}

double feasibility_defect(const std::vector<BasisRegistry>& registries, const Factors& b) {
  double worst = 0.0;
  for (std::size_t l = 0; l < registries.size(); ++l) {
    const BasisRegistry& reg = registries[l];
    if (reg.empty()) continue;
    const double bn = frobenius_norm(b[l]);
    if (bn == 0.0) continue;
    worst = std::max(worst, frobenius_norm(matmul_tn(reg.concatenated(), b[l])) / bn);
  }
  return worst;
}

std::pair<Factors, Factors> initial_factors(const std::vector<Matrix>& base_weights,
                                            const std::vector<BasisRegistry>& registries,
                                            std::size_t rank, double init_scale, Rng& rng) {
  Factors a, b;
  for (std::size_t l = 0; l < base_weights.size(); ++l) {
    const double n = static_cast<double>(base_weights[l].rows());
    const double m = static_cast<double>(base_weights[l].cols());
    a.push_back(gaussian_matrix(base_weights[l].rows(), rank, rng, init_scale / std::sqrt(n)));
    b.push_back(registries[l].project(gaussian_matrix(base_weights[l].cols(), rank, rng, init_scale / std::sqrt(m))));
  }
  return {std::move(a), std::move(b)};
}

Matrix frozen_feasible_basis(const BasisRegistry& registry, std::size_t rank, Rng& rng) {
  const Matrix frame = haar_frame(registry.dim(), rank, rng);
  if (registry.empty()) return frame;
  return orthonormalize(matmul(registry.exact_complement_projector(), frame));
}

namespace {

struct Stats {
  double loss = 0.0;
  double grad_a = 0.0;
  double reduced_b = 0.0;
};

Factors project_all(const std::vector<BasisRegistry>& regs, const Factors& b) {
  Factors out;
  for (std::size_t l = 0; l < b.size(); ++l) out.push_back(regs[l].project(b[l]));
  return out;
}

// Loss, ‖∇_A𝓛‖ and ‖P⊥∇_BΦ‖ at (a, b) for the reduced objective with step α.
Stats iterate_stats(const FactorObjective& obj, const std::vector<BasisRegistry>& regs, const Factors& a,
                    const Factors& b, double alpha, bool coupled) {
  const Evaluation ev = obj.evaluate(a, b);
  const Factors a_tilde = axpy(a, -alpha, ev.grad_a);
  const ReducedStep step = reduced_direction(obj, a_tilde, b, a, b, coupled ? alpha : 0.0);
  return {ev.loss, frobenius_norm(ev.grad_a), frobenius_norm(project_all(regs, step.direction))};
}

void require_finite(double loss, const Factors& a, const Factors& b, std::size_t k) {
  if (std::isfinite(loss)) return;
  std::string snap;
  for (std::size_t l = 0; l < a.size(); ++l) {
    snap += fmt::format(" layer {}: |A|={:.6e} |B|={:.6e} finite={}", l, frobenius_norm(a[l]),
                        frobenius_norm(b[l]), all_finite(a[l]) && all_finite(b[l]));
  }
  throw NumericalError(fmt::format("non-finite loss at bilevel iteration {};{}", k, snap));
}

struct Steps {
  StepConstants constants;
  double alpha = 0.0;
  double beta = 0.0;
};

Steps choose_steps(const FactorObjective& obj, const Factors& a, const Factors& b, const BilevelConfig& cfg,
                   Rng& rng) {
  Steps s;
  const bool need = cfg.alpha_mode == StepMode::theoretical || cfg.beta_mode == StepMode::theoretical;
  if (need) s.constants = estimate_constants(obj, a, b, cfg.constants, rng);
  s.alpha = cfg.alpha_mode == StepMode::theoretical ? s.constants.alpha : cfg.alpha_value;
  s.beta = cfg.beta_mode == StepMode::theoretical ? s.constants.beta : cfg.beta_value;
  return s;
}

TraceRecord make_record(std::size_t k, const Stats& st, const Steps& steps, double defect, double eps,
                        double wall_ms) {
  TraceRecord r;
  r.iteration = k;
  r.objective = st.loss;
  r.grad_a_norm = st.grad_a;
  r.reduced_grad_b_norm = st.reduced_b;
  r.alpha = steps.alpha;
  r.beta = steps.beta;
  r.L_hat = steps.constants.L;
  r.L_phi_hat = steps.constants.L_phi;
  r.feasibility_defect = defect;
  r.feasible = defect <= std::max(1e-8, 2.0 * eps);
  r.wall_ms = wall_ms;
  return r;
}

bool theoretical(const BilevelConfig& cfg) {
  return cfg.alpha_mode == StepMode::theoretical || cfg.beta_mode == StepMode::theoretical;
}

bool ascended(double next, double prev) { return next > prev + 1e-12 * std::abs(prev); }

}  // namespace

ConceptFit fit_concept_bilevel(const FactorObjective& obj, const std::vector<BasisRegistry>& registries,
                               const Factors& a0, const Factors& b0, const BilevelConfig& cfg,
                               bool coupled, Rng& rng) {
  cfg.validate();
  const auto start = Clock::now();
  ConceptFit fit;
  fit.trace.optimizer = coupled ? OptimizerKind::seqlora : OptimizerKind::alternating;
  Factors a = a0;
  Factors b = project_all(registries, b0);

  Steps steps = choose_steps(obj, a, b, cfg, rng);
  Stats st = iterate_stats(obj, registries, a, b, steps.alpha, coupled);
  require_finite(st.loss, a, b, 0);

  for (std::size_t k = 0; k < cfg.K; ++k) {
    TraceRecord rec = make_record(k, st, steps, feasibility_defect(registries, b), cfg.epsilon, elapsed_ms(start));
    const Factors grad_a_k = obj.gradients(a, b).grad_a;
    double alpha = steps.alpha;
    double beta = steps.beta;
    Factors a_next, b_next;
    double f_next = 0.0;
    std::size_t halvings = 0;
    for (;;) {
      const Factors a_tilde = axpy(a, -alpha, grad_a_k);
      Factors b_loc = b;
      for (std::size_t s = 0; s < cfg.S_B; ++s) {
        const Factors& b_hess = cfg.hessian_point == HessianPoint::outer ? b : b_loc;
        const ReducedStep rs = reduced_direction(obj, a_tilde, b_loc, a, b_hess, coupled ? alpha : 0.0);
        b_loc = project_all(registries, axpy(b_loc, -beta, rs.direction));
      }
      Factors a_loc = cfg.a_restart == ARestart::outer ? a : a_tilde;
      for (std::size_t s = 0; s < cfg.S_A_prime; ++s) a_loc = axpy(a_loc, -alpha, obj.gradients(a_loc, b_loc).grad_a);
      f_next = obj.loss(a_loc, b_loc);
      a_next = std::move(a_loc);
      b_next = std::move(b_loc);
      if (!theoretical(cfg) || !ascended(f_next, st.loss) || halvings >= cfg.max_halvings) break;
      ++halvings;
      alpha *= 0.5;
      beta *= 0.5;
    }
    if (halvings > 0) {
      fit.trace.events.push_back(fmt::format(
          "iteration {}: step halved {} time(s) after a descent violation (alpha {:.6e}, beta {:.6e})", k,
          halvings, alpha, beta));
    }
    rec.alpha = alpha;
    rec.beta = beta;
    rec.halvings = halvings;
    fit.trace.records.push_back(rec);

    a = std::move(a_next);
    b = std::move(b_next);
    require_finite(f_next, a, b, k + 1);
    steps = choose_steps(obj, a, b, cfg, rng);
    st = iterate_stats(obj, registries, a, b, steps.alpha, coupled);
  }
  fit.trace.records.push_back(
      make_record(cfg.K, st, steps, feasibility_defect(registries, b), cfg.epsilon, elapsed_ms(start)));
  fit.a = std::move(a);
  fit.b = std::move(b);
  return fit;
}

ConceptFit fit_concept_frozen(const FactorObjective& obj, const std::vector<BasisRegistry>& registries,
                              const Factors& a0, const Factors& b, const BilevelConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto start = Clock::now();
  ConceptFit fit;
  fit.trace.optimizer = OptimizerKind::frozen;
  Factors a = a0;
  const std::size_t steps_per_iter = cfg.S_B + cfg.S_A_prime;

  Steps steps = choose_steps(obj, a, b, cfg, rng);
  Stats st = iterate_stats(obj, registries, a, b, steps.alpha, true);
  require_finite(st.loss, a, b, 0);
  for (std::size_t k = 0; k < cfg.K; ++k) {
    TraceRecord rec = make_record(k, st, steps, feasibility_defect(registries, b), cfg.epsilon, elapsed_ms(start));
    double alpha = steps.alpha;
    Factors a_next;
    double f_next = 0.0;
    std::size_t halvings = 0;
    for (;;) {
      Factors a_loc = a;
      for (std::size_t s = 0; s < steps_per_iter; ++s) a_loc = axpy(a_loc, -alpha, obj.gradients(a_loc, b).grad_a);
      f_next = obj.loss(a_loc, b);
      a_next = std::move(a_loc);
      if (cfg.alpha_mode != StepMode::theoretical || !ascended(f_next, st.loss) || halvings >= cfg.max_halvings) break;
      ++halvings;
      alpha *= 0.5;
    }
    if (halvings > 0) {
      fit.trace.events.push_back(
          fmt::format("iteration {}: step halved {} time(s) after a descent violation (alpha {:.6e})", k, halvings, alpha));
    }
    rec.alpha = alpha;
    rec.beta = 0.0;
    rec.halvings = halvings;
    fit.trace.records.push_back(rec);
    a = std::move(a_next);
    require_finite(f_next, a, b, k + 1);
    steps = choose_steps(obj, a, b, cfg, rng);
    st = iterate_stats(obj, registries, a, b, steps.alpha, true);
  }
  TraceRecord last = make_record(cfg.K, st, steps, feasibility_defect(registries, b), cfg.epsilon, elapsed_ms(start));
  last.beta = 0.0;
  fit.trace.records.push_back(last);
  fit.a = std::move(a);
  fit.b = b;
  return fit;
}

void canonical_gauge(Matrix& a, Matrix& b) {
  const QR qr = householder_qr(b);
  double lo = INFINITY, hi = 0.0;
  for (std::size_t c = 0; c < qr.r.rows(); ++c) {
    lo = std::min(lo, qr.r(c, c));
    hi = std::max(hi, qr.r(c, c));
  }
  // A rank-deficient b would gain arbitrary (possibly infeasible) columns.
  if (!(hi > 0.0) || lo < 1e-12 * hi) return;
  a = matmul_nt(a, qr.r);
  b = qr.q;
}

FitResult fit_stream(OptimizerKind kind, const std::vector<ConceptTask>& stream,
                     const std::vector<Matrix>& base_weights, const BilevelConfig& cfg, Rng& rng) {
  cfg.validate();
  if (stream.empty()) throw std::invalid_argument("concept stream is empty");
  FitResult out;
  out.model = ComposedModel(base_weights);
  for (std::size_t l = 0; l < base_weights.size(); ++l)
    out.registries.emplace_back(l, base_weights[l].cols(), cfg.epsilon);

  for (std::size_t i = 0; i < stream.size(); ++i) {
    for (const BasisRegistry& reg : out.registries) {
      if (reg.used_rank() + cfg.rank > reg.dim()) {
        throw CapacityError(fmt::format(
            "concept {} does not fit: layer {} already holds {} of {} basis columns (at most floor(m/r) = {} "
            "concepts of rank {})",
            i, reg.layer(), reg.used_rank(), reg.dim(), reg.dim() / cfg.rank, cfg.rank));
      }
    }
    Rng concept_rng = rng.split(i);
    Rng init_rng = concept_rng.split(0);
    Rng step_rng = concept_rng.split(1);
    const TaskObjective obj(stream[i], out.model.compose_all(i));
    auto [a0, b0] = initial_factors(base_weights, out.registries, cfg.rank, cfg.init_scale, init_rng);
    ConceptFit fit;
    if (kind == OptimizerKind::frozen) {
      Factors frozen;
      for (const BasisRegistry& reg : out.registries) frozen.push_back(frozen_feasible_basis(reg, cfg.rank, init_rng));
      fit = fit_concept_frozen(obj, out.registries, a0, frozen, cfg, step_rng);
    } else {
      fit = fit_concept_bilevel(obj, out.registries, a0, b0, cfg, kind == OptimizerKind::seqlora, step_rng);
    }
    fit.trace.concept_index = i;
    std::vector<LoRAFactorPair> pairs;
    for (std::size_t l = 0; l < base_weights.size(); ++l) {
      canonical_gauge(fit.a[l], fit.b[l]);
      pairs.emplace_back(l, fit.a[l], fit.b[l]);
      out.registries[l].append(fit.b[l]);
    }
    out.model.add_concept(std::move(pairs));
    out.traces.push_back(std::move(fit.trace));
  }
  rng.next_u64();
  return out;
}

FitResult seqlora_fit(const std::vector<ConceptTask>& stream, const std::vector<Matrix>& base_weights,
                      const BilevelConfig& cfg, Rng& rng) {
  return fit_stream(OptimizerKind::seqlora, stream, base_weights, cfg, rng);
}

FitResult alternating_fit(const std::vector<ConceptTask>& stream, const std::vector<Matrix>& base_weights,
                          const BilevelConfig& cfg, Rng& rng) {
  return fit_stream(OptimizerKind::alternating, stream, base_weights, cfg, rng);
}

FitResult frozen_basis_fit(const std::vector<ConceptTask>& stream, const std::vector<Matrix>& base_weights,
                           const BilevelConfig& cfg, Rng& rng) {
  return fit_stream(OptimizerKind::frozen, stream, base_weights, cfg, rng);
}

}  // namespace seqlora
