// SPDX-License-Identifier: Apache-2.0
//
// Data-parallel inner loops. Every OpenMP kernel has a serial reference with
// the same arithmetic order per output element, so the two agree bit for bit
// and tests can compare them with ==.

#pragma once

#include <cstddef>
#include <functional>
#include <span>

namespace seqlora::kernels {

enum class Exec { serial, parallel };

/// c (m×n) = a (m×k) · b (k×n), all row-major. `c` is overwritten.
void gemm_serial(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n);
void gemm_parallel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t m, std::size_t k, std::size_t n);

/// Operand volume (m·k·n) above which matmul dispatches to the parallel kernel.
inline constexpr std::size_t kParallelGemmVolume = 1u << 15;

/// Runs body(i) for i in [0, count). Bodies must write only to slot i of
/// caller-owned storage; reductions happen afterwards in index order.
void for_each_index(std::size_t count, Exec exec, const std::function<void(std::size_t)>& body);

/// Number of OpenMP threads available (1 when built without OpenMP).
int max_threads();

}  // namespace seqlora::kernels
