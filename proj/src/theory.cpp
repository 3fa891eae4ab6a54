// SPDX-License-Identifier: Apache-2.0

#include "seqlora/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "seqlora/linalg.hpp"

namespace seqlora {

std::vector<std::size_t> audit_descent(const DescentTrace& trace, double slack) {
  std::vector<std::size_t> bad;
  const auto& rec = trace.records;
  for (std::size_t k = 0; k + 1 < rec.size(); ++k) {
    const double prev = rec[k].objective;
    // Relative slack measured against |F| so that negative objectives are
    // handled the same way as positive ones.
    if (rec[k + 1].objective > prev + slack * std::abs(prev)) bad.push_back(k + 1);
  }
  return bad;
}

namespace {

Matrix span_projector(const Matrix& b) {
  if (b.empty() || frobenius_norm(b) == 0.0) return Matrix(b.rows(), b.rows());
  return projector_from_orthonormal(orthonormalize(b));
}

double sum_tail(const std::vector<double>& v, std::size_t from) {
  double s = 0.0;
  for (std::size_t i = from; i < v.size(); ++i) s += std::max(v[i], 0.0);
  return s;
}

}  // namespace

double residual_energy(const Matrix& sigma, const Matrix& b) {
  if (sigma.rows() != b.rows()) {
    throw DimensionError(fmt::format("residual_energy: covariance {} vs basis {}", sigma.shape(), b.shape()));
  }
  return trace(sigma) - frobenius_dot(span_projector(b), sigma);
}

double annihilation_ratio(const ComposedModel& model, std::size_t j, std::size_t layer) {
  const Matrix c = model.crosstalk_operator(j, layer);
  const Matrix p = span_projector(model.factors(j, layer).b);
  return frobenius_norm(matmul(c, p)) / (frobenius_norm(c) * frobenius_norm(p) + 1e-30);
}

ForgettingReport forgetting_decomposition(const ComposedModel& model, const ConceptTask& task_j,
                                          std::size_t j) {
  if (task_j.kind != TaskKind::linear_population) {
    throw std::invalid_argument(fmt::format(
        "forgetting decomposition needs a linear-population task, got {}", to_string(task_j.kind)));
  }
  if (model.layer_count() != 1) {
    throw std::invalid_argument("forgetting decomposition is defined for single-layer models");
  }
  const std::size_t t = model.concept_count();
  if (j >= t) throw std::out_of_range(fmt::format("concept {} not in a model of {} concepts", j, t));

  const Matrix w_j = model.compose_weight(0, j + 1);
  const Matrix w_t = model.compose_weight(0, t);
  const Matrix c = model.crosstalk_operator(j, 0);
  const Matrix& sigma = task_j.sigma;
  const std::size_t m = sigma.rows();

  const Matrix p_b = span_projector(model.factors(j, 0).b);
  const Matrix p_perp = Matrix::identity(m) - p_b;
  const Matrix cp = matmul(c, p_perp);
  const Matrix grad = 2.0 * matmul(w_j - task_j.target.front(), sigma);

  ForgettingReport r;
  r.j = j;
  r.lhs = population_loss(task_j, w_t) - population_loss(task_j, w_j);
  r.quad_term = frobenius_dot(matmul(cp, sigma), cp);
  r.grad_term = frobenius_dot(grad, c);
  r.residual_energy = frobenius_dot(p_perp, sigma);
  r.epsilon_j = frobenius_norm(grad);
  r.stationary = r.epsilon_j <= kStationaryTolerance;
  const double c_op = frobenius_norm(c) > 0.0 ? spectral_norm(c) : 0.0;
  r.upper_bound = c_op * c_op * r.residual_energy + r.epsilon_j * frobenius_norm(c);
  r.identity_residual = std::abs(r.lhs - r.quad_term - r.grad_term) / (std::abs(r.lhs) + 1.0);
  r.annihilation = frobenius_norm(matmul(c, p_b)) / (frobenius_norm(c) * frobenius_norm(p_b) + 1e-30);
  return r;
}

BasisStudy optimal_basis_study(const Matrix& sigma, const BasisRegistry& registry, std::size_t r,
                               std::size_t mc_trials, Rng& rng, kernels::Exec exec) {
  const std::size_t m = registry.dim();
  if (sigma.rows() != m || sigma.cols() != m) {
    throw DimensionError(fmt::format("basis study: covariance {} for a registry of dimension {}", sigma.shape(), m));
  }
  if (r == 0) throw std::invalid_argument("basis study needs r >= 1");
  const std::size_t d_free = registry.free_dim();
  if (r > d_free) {
    throw CapacityError(fmt::format("basis study: rank {} exceeds the free dimension {}", r, d_free));
  }

  BasisStudy s;
  s.m = m;
  s.r = r;
  s.d_free = d_free;
  s.trials = mc_trials;

  const Matrix p_free = registry.empty() ? Matrix::identity(m) : registry.exact_complement_projector();
  s.sigma_tilde = symmetrize(matmul(matmul(p_free, sigma), p_free));
  s.spectrum = sym_eig(s.sigma_tilde).values;
  const double total = trace(sigma);
  const double tilde_total = trace(s.sigma_tilde);
  s.blocked_mass = total - tilde_total;
  s.optimal_residual = s.blocked_mass + sum_tail(s.spectrum, r);

  // Orthonormal coordinates N of the free complement; feasible frames are N·F.
  const SymEig pe = sym_eig(p_free);
  const Matrix n = pe.vectors.columns(0, d_free);
  const Matrix sigma_n = symmetrize(matmul_tn(n, matmul(sigma, n)));
  const SymEig ne = sym_eig(sigma_n);
  const Matrix u_opt = matmul(n, ne.vectors.columns(0, r));
  const Matrix p_opt = projector_from_orthonormal(u_opt);
  s.optimal_captured = frobenius_dot(p_opt, sigma);
  s.optimal_residual_direct = total - s.optimal_captured;

  std::vector<double> captured(mc_trials, 0.0);
  kernels::for_each_index(mc_trials, exec, [&](std::size_t i) {
    Rng local = rng.split(i);
    const Matrix f = haar_frame(d_free, r, local);
    captured[i] = frobenius_dot(f, matmul(sigma_n, f));
  });
  rng.next_u64();

  s.expected_captured = static_cast<double>(r) / static_cast<double>(d_free) * tilde_total;
  if (mc_trials > 0) {
    const double nt = static_cast<double>(mc_trials);
    const double mean = std::accumulate(captured.begin(), captured.end(), 0.0) / nt;
    double ss = 0.0;
    for (double c : captured) ss += (c - mean) * (c - mean);
    const double var = mc_trials > 1 ? ss / (nt - 1.0) : 0.0;
    s.mc_mean_captured = mean;
    s.mc_se_captured = std::sqrt(var / nt);
    s.mc_mean_residual = total - mean;
    s.mc_min_residual = total - *std::max_element(captured.begin(), captured.end());
    s.gap = s.mc_mean_residual - s.optimal_residual;
    s.dominated = s.optimal_residual <= s.mc_min_residual + 1e-10;
    // A degenerate spectrum gives zero variance; then the mean must match to rounding.
    const double tol = std::max(3.0 * s.mc_se_captured, 1e-12 * (std::abs(s.expected_captured) + 1.0));
    s.mean_within_3se = std::abs(mean - s.expected_captured) <= tol;
  } else {
    s.dominated = true;
    s.mean_within_3se = true;
  }
  return s;
}

namespace {

// E exp(X²/t²) for X uniform on [−√3, √3], composite Simpson on [0, √3].
double uniform_mgf_square(double t) {
  const double a = std::sqrt(3.0);
  const int n = 4000;
  const double h = a / n;
  double s = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double x = i * h;
    const double w = (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    s += w * std::exp(x * x / (t * t));
  }
  return s * h / 3.0 / a;
}

double uniform_psi2() {
  double lo = 0.5, hi = 5.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (uniform_mgf_square(mid) > 2.0 ? lo : hi) = mid;
  }
  return hi;
}

std::string sampler_name(EntrySampler s) {
  switch (s) {
    case EntrySampler::gaussian: return "gaussian";
    case EntrySampler::rademacher: return "rademacher";
    case EntrySampler::uniform: return "uniform";
  }
  return "?";
}

}  // namespace

double subgaussian_norm(EntrySampler sampler) {
  switch (sampler) {
    // E exp(X²/t²) = (1 − 2/t²)^{-1/2} = 2  ⇒  t² = 8/3.
    case EntrySampler::gaussian: return std::sqrt(8.0 / 3.0);
    case EntrySampler::rademacher: return 1.0 / std::sqrt(std::log(2.0));
    case EntrySampler::uniform: {
      static const double k = uniform_psi2();
      return k;
    }
  }
  return 0.0;
}

double hw_deviation(double xi, double c1, double k, double psi_fro, double psi_op, double qtq_fro,
                    double q_op) {
  if (!(xi > 0.0 && xi < 1.0)) throw std::invalid_argument(fmt::format("xi must be in (0, 1), got {}", xi));
  const double lg = std::log(2.0 / xi);
  const double k2 = k * k;
  const double sub_gauss = std::sqrt(c1) * k2 * psi_fro * qtq_fro * std::sqrt(lg);
  const double sub_exp = c1 * k2 * psi_op * q_op * q_op * lg;
  return std::max(sub_gauss, sub_exp);
}

std::string classify_regime(double lhs, double rhs) {
  return lhs >= rhs ? "sub-gaussian" : "sub-exponential";
}

namespace {

double effective_rank(double fro, double op) { return op > 0.0 ? fro / op : 0.0; }

double op_norm(const Matrix& m) { return frobenius_norm(m) > 0.0 ? spectral_norm(m) : 0.0; }

}  // namespace

HWReport hw_crosstalk_study(const Matrix& sigma_perp, const Matrix& psi, const Matrix& c,
                            std::size_t samples, const std::vector<double>& xi_list,
                            const std::vector<double>& c1_grid, Rng& rng, EntrySampler sampler,
                            kernels::Exec exec) {
  const std::size_t m = sigma_perp.rows();
  if (sigma_perp.cols() != m) throw DimensionError(fmt::format("Σ⊥ must be square, got {}", sigma_perp.shape()));
  if (psi.rows() != psi.cols() || psi.empty()) throw DimensionError(fmt::format("Ψ must be square, got {}", psi.shape()));
  if (c.cols() != m) throw DimensionError(fmt::format("crosstalk {} does not act on dimension {}", c.shape(), m));
  if (xi_list.empty()) throw std::invalid_argument("hw study needs at least one xi");
  const std::size_t p = psi.rows();

  HWReport r;
  r.sampler = sampler_name(sampler);
  r.samples = samples;
  r.k = subgaussian_norm(sampler);
  r.xi = xi_list;
  r.c1_grid = c1_grid;
  std::sort(r.c1_grid.begin(), r.c1_grid.end());

  const Matrix q = matmul(c, sqrt_spd(sigma_perp));
  const Matrix psi_half = sqrt_spd(psi);
  const double qf = frobenius_norm(q);
  r.mu_z = trace(psi) * qf * qf;
  r.psi_fro = frobenius_norm(psi);
  r.psi_op = op_norm(psi);
  const Matrix qtq = matmul_tn(q, q);
  r.qtq_fro = frobenius_norm(qtq);
  r.q_op = op_norm(q);
  r.reff_psi = effective_rank(r.psi_fro, r.psi_op);
  r.reff_qtq = effective_rank(r.qtq_fro, r.q_op * r.q_op);

  std::vector<double> z(samples, 0.0);
  const bool identity_psi = psi == Matrix::identity(p);
  kernels::for_each_index(samples, exec, [&](std::size_t i) {
    Rng local = rng.split(i);
    Matrix t = matmul(q, sample_matrix(m, p, local, sampler));
    if (!identity_psi) t = matmul(t, psi_half);
    const double n = frobenius_norm(t);
    z[i] = n * n;
  });
  rng.next_u64();

  if (samples > 0) {
    const double ns = static_cast<double>(samples);
    const double mean = std::accumulate(z.begin(), z.end(), 0.0) / ns;
    double ss = 0.0;
    for (double v : z) ss += (v - mean) * (v - mean);
    r.empirical_mean = mean;
    r.empirical_se = samples > 1 ? std::sqrt(ss / (ns - 1.0) / ns) : 0.0;
  }
  r.mean_within_3se =
      std::abs(r.empirical_mean - r.mu_z) <= std::max(3.0 * r.empirical_se, 1e-12 * (r.mu_z + 1.0));

  // Nearest-rank empirical quantiles.
  std::vector<double> sorted = z;
  std::sort(sorted.begin(), sorted.end());
  for (double xi : xi_list) {
    if (sorted.empty()) {
      r.quantiles.push_back(0.0);
      continue;
    }
    const double rank = std::ceil((1.0 - xi) * static_cast<double>(sorted.size()));
    const std::size_t idx = std::min(sorted.size() - 1, static_cast<std::size_t>(std::max(rank, 1.0)) - 1);
    r.quantiles.push_back(sorted[idx]);
  }

  for (double c1 : r.c1_grid) {
    std::vector<double> row;
    bool ok = true;
    for (std::size_t x = 0; x < xi_list.size(); ++x) {
      const double t = hw_deviation(xi_list[x], c1, r.k, r.psi_fro, r.psi_op, r.qtq_fro, r.q_op);
      row.push_back(t);
      if (r.quantiles[x] > r.mu_z + t) ok = false;
    }
    r.bounds.push_back(std::move(row));
    if (ok && !r.calibrated_c1) r.calibrated_c1 = c1;
  }

  const double xi_min = *std::min_element(xi_list.begin(), xi_list.end());
  const double c1 = r.calibrated_c1.value_or(1.0);
  r.regime_lhs = r.reff_psi * r.reff_qtq;
  r.regime_rhs = std::sqrt(c1 * std::log(2.0 / xi_min));
  r.regime = classify_regime(r.regime_lhs, r.regime_rhs);
  return r;
}

E2EReport e2e_forgetting_bound(const ComposedModel& model, const ConceptTask& task_j, std::size_t j,
                               double xi, double c1) {
  if (!task_j.output_lipschitz) {
    throw std::invalid_argument("end-to-end bound needs a measured output Lipschitz estimate");
  }
  const std::size_t t = model.concept_count();
  if (j >= t) throw std::out_of_range(fmt::format("concept {} not in a model of {} concepts", j, t));
  const std::size_t layers = model.layer_count();
  if (task_j.layers() != layers) {
    throw DimensionError(fmt::format("task has {} layers, model has {}", task_j.layers(), layers));
  }
  const Matrix& x = task_j.x_holdout.empty() ? task_j.x : task_j.x_holdout;
  const Matrix& y = task_j.y_holdout.empty() ? task_j.y : task_j.y_holdout;
  if (x.empty()) throw std::invalid_argument("end-to-end bound needs a stored batch");

  E2EReport r;
  r.j = j;
  r.layers = layers;
  r.xi = xi;
  r.xi_per_layer = xi / static_cast<double>(layers);
  r.c1 = c1;
  r.output_lipschitz_measured = *task_j.output_lipschitz;

  const std::vector<Matrix> w_t = model.compose_all(t);
  const std::vector<Matrix> w_j = model.compose_all(j + 1);
  const std::vector<Matrix> h_j = forward_activations(w_j, task_j.activation, x);
  const Matrix& o_j = h_j.back();
  const Matrix o_t = network_output(w_t, task_j.activation, x);
  const double p = static_cast<double>(x.cols());
  auto f = [&](const Matrix& o) {
    const double n = frobenius_norm(o - y);
    return n * n / p;
  };
  r.empirical_forgetting = f(o_t) - f(o_j);

  auto gamma = [&](std::size_t l) { return l < task_j.gamma.size() ? task_j.gamma[l] : 1.0; };

  // Γ_ℓ = ∏_{ℓ'>ℓ} γ_ℓ'·‖W_T^(ℓ')‖₂, accumulated from the output side.
  r.gamma_prod.assign(layers, 1.0);
  for (std::size_t l = layers - 1; l-- > 0;) {
    r.gamma_prod[l] = r.gamma_prod[l + 1] * gamma(l + 1) * op_norm(w_t[l + 1]);
  }

  const double psi_fro = std::sqrt(p);
  const double k = subgaussian_norm(EntrySampler::gaussian);
  double reach = 0.0, reach_hw = 0.0, reach_hw_pre = 0.0;
  for (std::size_t l = 0; l < layers; ++l) {
    const Matrix c = model.crosstalk_operator(j, l);
    const Matrix& h = h_j[l];
    const double d = frobenius_norm(matmul(c, h));
    r.delta_norms.push_back(d);

    // Held-out second moment of the layer input, restricted to the residual
    // subspace of concept j. With Ψ = I_p the mean term equals ‖C P⊥ H‖_F².
    const Matrix p_b = span_projector(model.factors(j, l).b);
    const Matrix p_perp = Matrix::identity(p_b.rows()) - p_b;
    const Matrix sigma_perp = symmetrize(matmul(matmul(p_perp, matmul_nt(h, h) * (1.0 / p)), p_perp));
    const Matrix q = matmul(c, sqrt_spd(sigma_perp));
    const double qf = frobenius_norm(q);
    const double mu = p * qf * qf;
    const double qtq_fro = frobenius_norm(matmul_tn(q, q));
    const double q_op = op_norm(q);
    const double t_post = hw_deviation(r.xi_per_layer, c1, k, psi_fro, 1.0, qtq_fro, q_op);
    const double t_pre = hw_deviation(xi, c1, k, psi_fro, 1.0, qtq_fro, q_op);
    r.hw_delta.push_back(std::sqrt(mu + t_post));
    r.hw_delta_pre_union.push_back(std::sqrt(mu + t_pre));

    // The layer's own activation is applied after the perturbation.
    const double own = l + 1 < layers ? gamma(l) : 1.0;
    reach += own * r.gamma_prod[l] * d;
    reach_hw += own * r.gamma_prod[l] * r.hw_delta.back();
    reach_hw_pre += own * r.gamma_prod[l] * r.hw_delta_pre_union.back();
  }

  // |f(O_T) − f(O_j)| ≤ (2‖O_j − Y‖_F + R)/p · ‖O_T − O_j‖_F whenever ‖O_T − O_j‖_F ≤ R.
  const double base = frobenius_norm(o_j - y);
  r.output_lipschitz = (2.0 * base + reach) / p;
  r.bound = r.output_lipschitz * reach;
  r.hw_bound = (2.0 * base + reach_hw) / p * reach_hw;
  r.hw_bound_pre_union = (2.0 * base + reach_hw_pre) / p * reach_hw_pre;
  r.looseness = r.empirical_forgetting > 0.0 ? r.hw_bound / r.empirical_forgetting : 0.0;
  r.holds = r.empirical_forgetting <= r.bound * (1.0 + 1e-12) + 1e-300 &&
            r.empirical_forgetting <= r.hw_bound * (1.0 + 1e-12) + 1e-300;
  return r;
}

namespace {

nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

}  // namespace

nlohmann::json to_json(const ForgettingReport& r) {
  return {{"j", r.j},
          {"lhs", r.lhs},
          {"quad_term", r.quad_term},
          {"grad_term", r.grad_term},
          {"upper_bound", r.upper_bound},
          {"residual_energy", r.residual_energy},
          {"epsilon_j", r.epsilon_j},
          {"stationary", r.stationary},
          {"identity_residual", r.identity_residual},
          {"annihilation", r.annihilation}};
}

nlohmann::json to_json(const BasisStudy& s) {
  return {{"m", s.m},
          {"r", s.r},
          {"d_free", s.d_free},
          {"trials", s.trials},
          {"sigma_tilde", matrix_json(s.sigma_tilde)},
          {"spectrum", s.spectrum},
          {"blocked_mass", s.blocked_mass},
          {"optimal_residual", s.optimal_residual},
          {"optimal_residual_direct", s.optimal_residual_direct},
          {"optimal_captured", s.optimal_captured},
          {"mc_mean_residual", s.mc_mean_residual},
          {"mc_min_residual", s.mc_min_residual},
          {"mc_mean_captured", s.mc_mean_captured},
          {"mc_se_captured", s.mc_se_captured},
          {"expected_captured", s.expected_captured},
          {"gap", s.gap},
          {"dominated", s.dominated},
          {"mean_within_3se", s.mean_within_3se}};
}

nlohmann::json to_json(const HWReport& r) {
  nlohmann::json j = {{"sampler", r.sampler},
                      {"samples", r.samples},
                      {"k", r.k},
                      {"mu_z", r.mu_z},
                      {"empirical_mean", r.empirical_mean},
                      {"empirical_se", r.empirical_se},
                      {"mean_within_3se", r.mean_within_3se},
                      {"xi", r.xi},
                      {"quantiles", r.quantiles},
                      {"c1_grid", r.c1_grid},
                      {"bounds", r.bounds},
                      {"psi_fro", r.psi_fro},
                      {"psi_op", r.psi_op},
                      {"qtq_fro", r.qtq_fro},
                      {"q_op", r.q_op},
                      {"reff_psi", r.reff_psi},
                      {"reff_qtq", r.reff_qtq},
                      {"regime_lhs", r.regime_lhs},
                      {"regime_rhs", r.regime_rhs},
                      {"regime", r.regime}};
  j["calibrated_c1"] = r.calibrated_c1 ? nlohmann::json(*r.calibrated_c1) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json to_json(const E2EReport& r) {
  return {{"j", r.j},
          {"layers", r.layers},
          {"empirical_forgetting", r.empirical_forgetting},
          {"output_lipschitz_measured", r.output_lipschitz_measured},
          {"output_lipschitz", r.output_lipschitz},
          {"gamma_prod", r.gamma_prod},
          {"delta_norms", r.delta_norms},
          {"hw_delta", r.hw_delta},
          {"hw_delta_pre_union", r.hw_delta_pre_union},
          {"bound", r.bound},
          {"hw_bound", r.hw_bound},
          {"hw_bound_pre_union", r.hw_bound_pre_union},
          {"xi", r.xi},
          {"xi_per_layer", r.xi_per_layer},
          {"c1", r.c1},
          {"looseness", r.looseness},
          {"holds", r.holds}};
}

}  // namespace seqlora
