// SPDX-License-Identifier: Apache-2.0

#include "seqlora/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

namespace seqlora {

namespace {

double off_diagonal_norm(const Matrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

}  // namespace

SymEig sym_eig(const Matrix& m) {
  if (m.rows() != m.cols()) throw DimensionError("sym_eig requires a square matrix, got " + m.shape());
  const std::size_t n = m.rows();
  Matrix a = symmetrize(m);
  Matrix v = Matrix::identity(n);
  const double scale = frobenius_norm(a);

  if (scale > 0.0) {
    constexpr int kMaxSweeps = 100;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
      if (off_diagonal_norm(a) <= 1e-15 * scale) break;
      for (std::size_t p = 0; p + 1 < n; ++p) {
        for (std::size_t q = p + 1; q < n; ++q) {
          const double apq = a(p, q);
          if (std::abs(apq) <= std::numeric_limits<double>::min()) continue;
          // Rotation angle chosen so the smaller root is taken (stable form).
          const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
          const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
          const double c = 1.0 / std::sqrt(t * t + 1.0);
          const double s = t * c;
          for (std::size_t k = 0; k < n; ++k) {
            const double akp = a(k, p);
            const double akq = a(k, q);
            a(k, p) = c * akp - s * akq;
            a(k, q) = s * akp + c * akq;
          }
          for (std::size_t k = 0; k < n; ++k) {
            const double apk = a(p, k);
            const double aqk = a(q, k);
            a(p, k) = c * apk - s * aqk;
            a(q, k) = s * apk + c * aqk;
          }
          for (std::size_t k = 0; k < n; ++k) {
            const double vkp = v(k, p);
            const double vkq = v(k, q);
            v(k, p) = c * vkp - s * vkq;
            v(k, q) = s * vkp + c * vkq;
          }
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
  SymEig out{std::vector<double>(n), Matrix(n, n)};
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = a(order[c], order[c]);
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, c) = v(k, order[c]);
  }
  return out;
}

Matrix cholesky(const Matrix& m) {
  if (m.rows() != m.cols()) throw DimensionError("cholesky requires a square matrix, got " + m.shape());
  const std::size_t n = m.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = m(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) {
      throw NumericalError(fmt::format(
          "Cholesky pivot {} is non-positive ({:.3e}); the Gram matrix is degenerate, "
          "use a nonzero regularization",
          j, d));
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

Matrix spd_solve(const Matrix& m, const Matrix& rhs) {
  if (m.rows() != rhs.rows()) {
    throw DimensionError(fmt::format("spd_solve shape mismatch: {} and rhs {}", m.shape(), rhs.shape()));
  }
  const Matrix l = cholesky(m);
  const std::size_t n = m.rows();
  Matrix x = rhs;
  for (std::size_t c = 0; c < x.cols(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = x(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
      x(i, c) = s / l(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = x(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, c);
      x(ii, c) = s / l(ii, ii);
    }
  }
  return x;
}

PowerIteration power_iteration(const Matrix& m, std::size_t iters, double tol) {
  PowerIteration out;
  if (m.empty() || max_abs(m) == 0.0) return out;
  // Fixed pseudo-random start so the estimate is a pure function of m.
  Rng start_rng(0x5EEDF00DULL);
  Matrix v = gaussian_matrix(m.cols(), 1, start_rng);
  v *= 1.0 / frobenius_norm(v);
  const Matrix mt = m.transpose();
  double prev = 0.0;
  for (std::size_t it = 0; it < iters; ++it) {
    const Matrix mv = matmul(m, v);
    const double est = frobenius_norm(mv);
    out.history.push_back(est);
    out.value = std::max(out.value, est);
    if (est == 0.0) break;
    if (it > 0 && std::abs(est - prev) <= tol * est) break;
    prev = est;
    Matrix w = matmul(mt, mv);
    const double wn = frobenius_norm(w);
    if (wn == 0.0) break;
    v = w * (1.0 / wn);
  }
  return out;
}

double spectral_norm(const Matrix& m, std::size_t iters, double tol) {
  return power_iteration(m, iters, tol).value;
}

Matrix sqrt_spd(const Matrix& m) {
  const SymEig eig = sym_eig(m);
  const std::size_t n = m.rows();
  const double top = eig.values.empty() ? 0.0 : std::max(std::abs(eig.values.front()),
                                                          std::abs(eig.values.back()));
  std::vector<double> roots(n);
  for (std::size_t i = 0; i < n; ++i) {
    double lam = eig.values[i];
    if (lam < 0.0) {
      if (lam < -1e-12 * top) {
        throw NumericalError(fmt::format("sqrt_spd: eigenvalue {:.6e} is significantly negative", lam));
      }
      lam = 0.0;
    }
    roots[i] = std::sqrt(lam);
  }
  Matrix scaled = eig.vectors;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) scaled(i, j) *= roots[j];
  return symmetrize(matmul_nt(scaled, eig.vectors));
}

QR householder_qr(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (n > m) throw DimensionError("householder_qr needs rows >= cols, got " + a.shape());
  Matrix r = a;
  std::vector<std::vector<double>> reflectors(n);
  for (std::size_t k = 0; k < n; ++k) {
    double norm = 0.0;
    for (std::size_t i = k; i < m; ++i) norm += r(i, k) * r(i, k);
    norm = std::sqrt(norm);
    std::vector<double> v(m - k, 0.0);
    if (norm == 0.0) {
      reflectors[k] = std::move(v);
      continue;
    }
    const double alpha = r(k, k) >= 0.0 ? -norm : norm;
    for (std::size_t i = k; i < m; ++i) v[i - k] = r(i, k);
    v[0] -= alpha;
    const double vnorm2 = std::inner_product(v.begin(), v.end(), v.begin(), 0.0);
    if (vnorm2 > 0.0) {
      for (std::size_t j = k; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t i = k; i < m; ++i) dot += v[i - k] * r(i, j);
        const double f = 2.0 * dot / vnorm2;
        for (std::size_t i = k; i < m; ++i) r(i, j) -= f * v[i - k];
      }
    }
    reflectors[k] = std::move(v);
  }
  // Accumulate the thin Q by applying reflectors to the first n identity columns.
  Matrix q(m, n);
  for (std::size_t j = 0; j < n; ++j) q(j, j) = 1.0;
  for (std::size_t kk = n; kk-- > 0;) {
    const auto& v = reflectors[kk];
    const double vnorm2 = std::inner_product(v.begin(), v.end(), v.begin(), 0.0);
    if (vnorm2 == 0.0) continue;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t i = kk; i < m; ++i) dot += v[i - kk] * q(i, j);
      const double f = 2.0 * dot / vnorm2;
      for (std::size_t i = kk; i < m; ++i) q(i, j) -= f * v[i - kk];
    }
  }
  QR out{std::move(q), Matrix(n, n)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) out.r(i, j) = r(i, j);
  for (std::size_t j = 0; j < n; ++j) {
    if (out.r(j, j) < 0.0) {
      for (std::size_t i = 0; i < m; ++i) out.q(i, j) = -out.q(i, j);
      for (std::size_t c = j; c < n; ++c) out.r(j, c) = -out.r(j, c);
    }
  }
  return out;
}

Matrix orthonormalize(const Matrix& a) { return householder_qr(a).q; }

Matrix haar_frame(std::size_t m, std::size_t r, Rng& rng) {
  if (r > m) throw DimensionError(fmt::format("haar_frame needs r <= m, got r={} m={}", r, m));
  if (r == 0) throw DimensionError("haar_frame needs r >= 1");
  return householder_qr(gaussian_matrix(m, r, rng)).q;
}

Matrix projector_from_orthonormal(const Matrix& q) { return symmetrize(matmul_nt(q, q)); }

Matrix column_space_projector(const Matrix& b) {
  const Matrix gram = matmul_tn(b, b);
  const Matrix coeff = spd_solve(gram, b.transpose());  // (bᵀb)⁻¹ bᵀ
  return symmetrize(matmul(b, coeff));
}

double condition_number(const Matrix& b) {
  const SymEig eig = sym_eig(matmul_tn(b, b));
  const double top = eig.values.front();
  const double bottom = std::max(eig.values.back(), 0.0);
  if (bottom == 0.0) return std::numeric_limits<double>::infinity();
  return std::sqrt(top / bottom);
}

}  // namespace seqlora
