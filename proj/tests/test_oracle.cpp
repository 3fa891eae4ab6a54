// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "seqlora/oracle.hpp"

using namespace seqlora;

namespace {

struct Fixture {
  ConceptTask task;
  Matrix w0, a, b, g, v;
};

Fixture make(std::uint64_t seed, bool sampled) {
  Rng rng(seed);
  Fixture f;
  f.task = make_linear_task(6, 5, SpectrumSpec::geometric(0.7), 0.1, rng);
  if (sampled) f.task = attach_batch(std::move(f.task), 30, rng);
  f.w0 = gaussian_matrix(5, 6, rng, 0.4);
  f.a = gaussian_matrix(5, 2, rng);
  f.b = gaussian_matrix(6, 2, rng);
  f.g = gaussian_matrix(5, 2, rng);
  f.v = gaussian_matrix(6, 2, rng);
  return f;
}

}  // namespace

class LinearOracle : public ::testing::TestWithParam<bool> {};

TEST_P(LinearOracle, GradientsMatchFiniteDifferences) {
  const Fixture f = make(1, GetParam());
  const GradPair gp = loss_and_grads(f.task, f.w0, f.a, f.b);
  const auto la = [&](const Matrix& a) { return loss_and_grads(f.task, f.w0, a, f.b).loss; };
  const auto lb = [&](const Matrix& b) { return loss_and_grads(f.task, f.w0, f.a, b).loss; };
  EXPECT_LT(relative_error(gp.grad_a, fd_gradient(la, f.a)), 1e-7);
  EXPECT_LT(relative_error(gp.grad_b, fd_gradient(lb, f.b)), 1e-7);
}

TEST_P(LinearOracle, CrossHessianMatchesGenericFiniteDifference) {
  const Fixture f = make(2, GetParam());
  const TaskObjective obj(f.task, {f.w0});
  const Factors analytic = obj.cross_hessian({f.a}, {f.b}, {f.g});
  const Factors fd = fd_cross_hessian(obj, {f.a}, {f.b}, {f.g});
  EXPECT_LT(relative_error(analytic, fd), 1e-6);
  const Factors at = obj.cross_hessian_transposed({f.a}, {f.b}, {f.v});
  EXPECT_LT(relative_error(at, fd_cross_hessian_transposed(obj, {f.a}, {f.b}, {f.v})), 1e-6);
  EXPECT_EQ(analytic[0], cross_hessian_contract(f.task, f.w0, f.a, f.b, f.g));
}

TEST_P(LinearOracle, MixedPartialSymmetry) {
  const Fixture f = make(3, GetParam());
  const double lhs = frobenius_dot(f.v, cross_hessian_contract(f.task, f.w0, f.a, f.b, f.g));
  const double rhs = frobenius_dot(f.g, cross_hessian_transposed(f.task, f.w0, f.a, f.b, f.v));
  EXPECT_NEAR(lhs, rhs, 1e-10 * (1.0 + std::abs(lhs)));
}

TEST_P(LinearOracle, ReducedGradientIsGradientOfReducedObjective) {
  const Fixture f = make(4, GetParam());
  const TaskObjective obj(f.task, {f.w0});
  const double alpha = 0.05;
  // Φ(B) = 𝓛(A_k − α∇_A𝓛(A_k, B), B).
  const auto phi = [&](const Matrix& b) { return reduced_objective(obj, {f.a}, {b}, alpha); };
  const Matrix g_a = loss_and_grads(f.task, f.w0, f.a, f.b).grad_a;
  const Matrix a_tilde = f.a - alpha * g_a;
  const Matrix g_upd = loss_and_grads(f.task, f.w0, a_tilde, f.b).grad_a;
  const Matrix analytic = reduced_gradient(f.task, f.w0, f.a, f.b, g_upd, alpha);
  EXPECT_LT(relative_error(analytic, fd_gradient(phi, f.b)), 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Kinds, LinearOracle, ::testing::Values(false, true),
                         [](const auto& info) { return info.param ? "sampled" : "population"; });

TEST(DeepOracle, BackpropMatchesFiniteDifferences) {
  Rng rng(5);
  const std::vector<Matrix> w0{gaussian_matrix(5, 5, rng, 0.4), gaussian_matrix(3, 5, rng, 0.4)};
  const ConceptTask task = make_deep_task(w0, Activation::tanh, std::vector<SpectrumSpec>(2, SpectrumSpec::flat()), 0.05, 20, rng);
  const TaskObjective obj(task, w0);
  const Factors a{gaussian_matrix(5, 2, rng, 0.3), gaussian_matrix(3, 2, rng, 0.3)};
  const Factors b{gaussian_matrix(5, 2, rng, 0.3), gaussian_matrix(5, 2, rng, 0.3)};
  const Evaluation e = obj.evaluate(a, b);
  for (std::size_t l = 0; l < 2; ++l) {
    const auto fa = [&](const Matrix& x) {
      Factors aa = a;
      aa[l] = x;
      return obj.loss(aa, b);
    };
    const auto fb = [&](const Matrix& x) {
      Factors bb = b;
      bb[l] = x;
      return obj.loss(a, bb);
    };
    EXPECT_LT(relative_error(e.grad_a[l], fd_gradient(fa, a[l])), 1e-6);
    EXPECT_LT(relative_error(e.grad_b[l], fd_gradient(fb, b[l])), 1e-6);
  }
}

TEST(DeepOracle, ShapeChecks) {
  Rng rng(6);
  const std::vector<Matrix> w0{gaussian_matrix(4, 4, rng), gaussian_matrix(2, 4, rng)};
  const ConceptTask task = make_deep_task(w0, Activation::tanh, std::vector<SpectrumSpec>(2, SpectrumSpec::flat()), 0.0, 8, rng);
  const TaskObjective obj(task, w0);
  EXPECT_THROW(obj.evaluate({Matrix(4, 1)}, {Matrix(4, 1)}), DimensionError);
}

TEST(FactorHelpers, Arithmetic) {
  const Factors x{Matrix{{1, 2}}, Matrix{{3}}};
  const Factors y{Matrix{{1, 1}}, Matrix{{1}}};
  EXPECT_DOUBLE_EQ(frobenius_norm(x), std::sqrt(14.0));
  EXPECT_DOUBLE_EQ(frobenius_dot(x, y), 6.0);
  EXPECT_EQ(axpy(x, 2.0, y)[0], (Matrix{{3, 4}}));
  EXPECT_EQ(scaled(x, -1.0)[1], (Matrix{{-3}}));
}
