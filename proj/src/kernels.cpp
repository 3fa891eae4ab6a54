// SPDX-License-Identifier: Apache-2.0

#include "seqlora/kernels.hpp"

#include <algorithm>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace seqlora::kernels {

namespace {

// i-k-j order: each c(i, j) accumulates a(i, 0..k) in ascending k regardless
// of how rows are distributed, which keeps serial and parallel results equal.
inline void gemm_row(const double* a, const double* b, double* c, std::size_t i, std::size_t k,
                     std::size_t n) {
  double* ci = c + i * n;
  std::fill(ci, ci + n, 0.0);
  const double* ai = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const double aip = ai[p];
    if (aip == 0.0) continue;
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
  }
}

}  // namespace

void gemm_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) gemm_row(a.data(), b.data(), c.data(), i, k, n);
}

void gemm_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t m, std::size_t k, std::size_t n) {
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i) gemm_row(pa, pb, pc, static_cast<std::size_t>(i), k, n);
}

void for_each_index(std::size_t count, Exec exec, const std::function<void(std::size_t)>& body) {
  if (exec == Exec::serial) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  const auto n = static_cast<std::int64_t>(count);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::int64_t i = 0; i < n; ++i) body(static_cast<std::size_t>(i));
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace seqlora::kernels
