// SPDX-License-Identifier: Apache-2.0

#include "seqlora/oracle.hpp"

#include <cmath>

#include <fmt/format.h>

namespace seqlora {

double frobenius_norm(const Factors& f) {
  double s = 0.0;
  for (const Matrix& m : f) s += frobenius_dot(m, m);
  return std::sqrt(s);
}

double frobenius_dot(const Factors& a, const Factors& b) {
  if (a.size() != b.size()) throw DimensionError("factor lists differ in layer count");
  double s = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l) s += frobenius_dot(a[l], b[l]);
  return s;
}

Factors axpy(const Factors& x, double alpha, const Factors& y) {
  if (x.size() != y.size()) throw DimensionError("factor lists differ in layer count");
  Factors out = x;
  for (std::size_t l = 0; l < x.size(); ++l) out[l] += y[l] * alpha;
  return out;
}

Factors scaled(const Factors& x, double alpha) {
  Factors out = x;
  for (Matrix& m : out) m *= alpha;
  return out;
}

double relative_error(const Matrix& a, const Matrix& b, double floor) {
  require_same_shape(a, b, "relative_error");
  return frobenius_norm(a - b) / std::max(frobenius_norm(b), floor);
}

double relative_error(const Factors& a, const Factors& b, double floor) {
  return frobenius_norm(axpy(a, -1.0, b)) / std::max(frobenius_norm(b), floor);
}

Matrix fd_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x, double h) {
  Matrix g(x.rows(), x.cols());
  Matrix probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const double fp = f(probe);
    probe.data()[i] = orig - h;
    const double fm = f(probe);
    probe.data()[i] = orig;
    g.data()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

Factors fd_cross_hessian(const FactorObjective& obj, const Factors& a0, const Factors& b,
                         const Factors& g_a, double h) {
  Factors out;
  Factors probe = b;
  for (std::size_t l = 0; l < b.size(); ++l) {
    Matrix g(b[l].rows(), b[l].cols());
    for (std::size_t i = 0; i < b[l].size(); ++i) {
      double& entry = probe[l].data()[i];
      const double orig = entry;
      entry = orig + h;
      const double fp = frobenius_dot(g_a, obj.gradients(a0, probe).grad_a);
      entry = orig - h;
      const double fm = frobenius_dot(g_a, obj.gradients(a0, probe).grad_a);
      entry = orig;
      g.data()[i] = (fp - fm) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

Factors fd_cross_hessian_transposed(const FactorObjective& obj, const Factors& a, const Factors& b0,
                                    const Factors& v, double h) {
  Factors out;
  Factors probe = a;
  for (std::size_t l = 0; l < a.size(); ++l) {
    Matrix g(a[l].rows(), a[l].cols());
    for (std::size_t i = 0; i < a[l].size(); ++i) {
      double& entry = probe[l].data()[i];
      const double orig = entry;
      entry = orig + h;
      const double fp = frobenius_dot(v, obj.gradients(probe, b0).grad_b);
      entry = orig - h;
      const double fm = frobenius_dot(v, obj.gradients(probe, b0).grad_b);
      entry = orig;
      g.data()[i] = (fp - fm) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

Factors FactorObjective::cross_hessian(const Factors& a0, const Factors& b, const Factors& g_a) const {
  return fd_cross_hessian(*this, a0, b, g_a, fd_step);
}

Factors FactorObjective::cross_hessian_transposed(const Factors& a, const Factors& b0,
                                                  const Factors& v) const {
  return fd_cross_hessian_transposed(*this, a, b0, v, fd_step);
}

TaskObjective::TaskObjective(const ConceptTask& task, std::vector<Matrix> base_weights)
    : task_(&task), base_(std::move(base_weights)) {
  if (base_.size() != task.layers()) {
    throw DimensionError(fmt::format("objective has {} base layers but task has {}", base_.size(),
                                     task.layers()));
  }
  for (std::size_t l = 0; l < base_.size(); ++l) {
    if (base_[l].rows() != task.target[l].rows() || base_[l].cols() != task.target[l].cols()) {
      throw DimensionError(fmt::format("layer {} base weight {} does not match target {}", l,
                                       base_[l].shape(), task.target[l].shape()));
    }
  }
  if (task.kind == TaskKind::linear_population) {
    s_ = task.sigma;
    ds_ = matmul(base_[0] - task.target[0], task.sigma);
  } else if (task.kind == TaskKind::linear_sampled) {
    if (task.x.empty()) throw std::invalid_argument("sampled task has no stored batch");
    const double inv_p = 1.0 / static_cast<double>(task.x.cols());
    s_ = symmetrize(matmul_nt(task.x, task.x) * inv_p);
    ds_ = matmul_nt(matmul(base_[0], task.x) - task.y, task.x) * inv_p;
  } else if (task.x.empty()) {
    throw std::invalid_argument("deep task has no stored batch");
  }
}

void TaskObjective::check_shapes(const Factors& a, const Factors& b) const {
  if (a.size() != base_.size() || b.size() != base_.size()) {
    throw DimensionError(fmt::format("expected {} layers of factors, got A:{} B:{}", base_.size(),
                                     a.size(), b.size()));
  }
  for (std::size_t l = 0; l < base_.size(); ++l) {
    if (a[l].rows() != base_[l].rows() || b[l].rows() != base_[l].cols() || a[l].cols() != b[l].cols()) {
      throw DimensionError(fmt::format("layer {}: factors A {} B {} do not fit weight {}", l,
                                       a[l].shape(), b[l].shape(), base_[l].shape()));
    }
  }
}

std::vector<Matrix> TaskObjective::compose(const Factors& a, const Factors& b) const {
  check_shapes(a, b);
  std::vector<Matrix> w = base_;
  for (std::size_t l = 0; l < w.size(); ++l) w[l] += matmul_nt(a[l], b[l]);
  return w;
}

double TaskObjective::weight_loss(const std::vector<Matrix>& w) const {
  switch (task_->kind) {
    case TaskKind::linear_population: return population_loss(*task_, w[0]);
    case TaskKind::linear_sampled: return sampled_loss(w[0], task_->x, task_->y);
    case TaskKind::deep: return deep_loss(w, task_->activation, task_->x, task_->y);
  }
  return 0.0;
}

std::vector<Matrix> TaskObjective::weight_gradient(const std::vector<Matrix>& w, double* loss_out) const {
  const ConceptTask& t = *task_;
  if (t.kind == TaskKind::linear_population) {
    const Matrix e = w[0] - t.target[0];
    const Matrix es = matmul(e, t.sigma);
    if (loss_out) *loss_out = frobenius_dot(es, e) + t.noise_std * t.noise_std * static_cast<double>(e.rows());
    return {es * 2.0};
  }
  const double p = static_cast<double>(t.x.cols());
  if (t.kind == TaskKind::linear_sampled) {
    const Matrix r = t.y - matmul(w[0], t.x);
    if (loss_out) *loss_out = frobenius_dot(r, r) / p;
    return {matmul_nt(r, t.x) * (-2.0 / p)};
  }
  // Deep: h_ℓ = act(W_ℓ h_{ℓ−1}), last layer linear, 𝓛 = ‖Y − h_L‖²/p.
  const std::vector<Matrix> h = forward_activations(w, t.activation, t.x);
  const std::size_t depth = w.size();
  Matrix delta = h.back() - t.y;
  if (loss_out) *loss_out = frobenius_dot(delta, delta) / p;
  delta *= 2.0 / p;
  std::vector<Matrix> grads(depth);
  for (std::size_t l = depth; l-- > 0;) {
    grads[l] = matmul_nt(delta, h[l]);
    if (l == 0) break;
    Matrix back = matmul_tn(w[l], delta);
    if (t.activation == Activation::tanh) {
      const auto hv = h[l].data();
      auto bv = back.data();
      for (std::size_t i = 0; i < bv.size(); ++i) bv[i] *= 1.0 - hv[i] * hv[i];
    }
    delta = std::move(back);
  }
  return grads;
}

Evaluation TaskObjective::gradients(const Factors& a, const Factors& b) const {
  if (!linear()) return evaluate(a, b);
  check_shapes(a, b);
  // ∇_W = 2(W₀S − K + A·BᵀS) avoids forming the n×m weight.
  Matrix gw = ds_ + matmul(a[0], matmul_tn(b[0], s_));
  gw *= 2.0;
  Evaluation ev;
  ev.grad_a.push_back(matmul(gw, b[0]));
  ev.grad_b.push_back(matmul_tn(gw, a[0]));
  return ev;
}

Evaluation TaskObjective::evaluate(const Factors& a, const Factors& b) const {
  if (linear()) {
    Evaluation ev = gradients(a, b);
    ev.loss = loss(a, b);
    return ev;
  }
  const std::vector<Matrix> w = compose(a, b);
  Evaluation ev;
  const std::vector<Matrix> gw = weight_gradient(w, &ev.loss);
  for (std::size_t l = 0; l < w.size(); ++l) {
    ev.grad_a.push_back(matmul(gw[l], b[l]));
    ev.grad_b.push_back(matmul_tn(gw[l], a[l]));
  }
  return ev;
}

double TaskObjective::loss(const Factors& a, const Factors& b) const { return weight_loss(compose(a, b)); }

Factors TaskObjective::cross_hessian(const Factors& a0, const Factors& b, const Factors& g_a) const {
  if (!linear()) return FactorObjective::cross_hessian(a0, b, g_a);
  check_shapes(a0, b);
  require_same_shape(g_a[0], a0[0], "cross_hessian g_a");
  // 2·DSᵀG + 2·S·B·(GᵀA₀ + A₀ᵀG)
  const Matrix& g = g_a[0];
  const Matrix sym = matmul_tn(g, a0[0]) + matmul_tn(a0[0], g);
  Matrix out = matmul_tn(ds_, g) * 2.0;
  out += matmul(matmul(s_, b[0]), sym) * 2.0;
  return {std::move(out)};
}

Factors TaskObjective::cross_hessian_transposed(const Factors& a, const Factors& b0, const Factors& v) const {
  if (!linear()) return FactorObjective::cross_hessian_transposed(a, b0, v);
  check_shapes(a, b0);
  require_same_shape(v[0], b0[0], "cross_hessian_transposed v");
  // 2·DS·V + 2·A·(VᵀS B₀ + B₀ᵀS V)
  const Matrix sv = matmul(s_, v[0]);
  const Matrix sym = matmul_tn(sv, b0[0]) + matmul_tn(b0[0], sv);
  Matrix out = matmul(ds_, v[0]) * 2.0;
  out += matmul(a[0], sym) * 2.0;
  return {std::move(out)};
}

GradPair loss_and_grads(const ConceptTask& task, const Matrix& w0, const Matrix& a, const Matrix& b) {
  const TaskObjective obj(task, {w0});
  Evaluation ev = obj.evaluate({a}, {b});
  return {std::move(ev.grad_a[0]), std::move(ev.grad_b[0]), ev.loss};
}

Matrix cross_hessian_contract(const ConceptTask& task, const Matrix& w0, const Matrix& a0,
                              const Matrix& b, const Matrix& g_a) {
  const TaskObjective obj(task, {w0});
  return std::move(obj.cross_hessian({a0}, {b}, {g_a})[0]);
}

Matrix cross_hessian_transposed(const ConceptTask& task, const Matrix& w0, const Matrix& a,
                                const Matrix& b0, const Matrix& v) {
  const TaskObjective obj(task, {w0});
  return std::move(obj.cross_hessian_transposed({a}, {b0}, {v})[0]);
}

Matrix reduced_gradient(const ConceptTask& task, const Matrix& w0, const Matrix& a_k, const Matrix& b,
                        const Matrix& g_a_at_updated, double alpha) {
  const TaskObjective obj(task, {w0});
  const Factors ak{a_k};
  const Factors bb{b};
  const Factors a_tilde = axpy(ak, -alpha, obj.evaluate(ak, bb).grad_a);
  Matrix direct = std::move(obj.evaluate(a_tilde, bb).grad_b[0]);
  if (alpha == 0.0) return direct;
  direct -= obj.cross_hessian(ak, bb, {g_a_at_updated})[0] * alpha;
  return direct;
}

ReducedStep reduced_direction(const FactorObjective& obj, const Factors& a_tilde, const Factors& b,
                              const Factors& a_k, const Factors& b_hess, double alpha) {
  Evaluation ev = obj.evaluate(a_tilde, b);
  ReducedStep step;
  step.loss = ev.loss;
  step.direction = ev.grad_b;
  if (alpha != 0.0) step.direction = axpy(step.direction, -alpha, obj.cross_hessian(a_k, b_hess, ev.grad_a));
  step.g_a = std::move(ev.grad_a);
  step.g_b = std::move(ev.grad_b);
  return step;
}

double reduced_objective(const FactorObjective& obj, const Factors& a_k, const Factors& b, double alpha) {
  const Factors a_tilde = axpy(a_k, -alpha, obj.evaluate(a_k, b).grad_a);
  return obj.loss(a_tilde, b);
}

}  // namespace seqlora
