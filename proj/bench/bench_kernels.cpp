// SPDX-License-Identifier: Apache-2.0
//
// Serial reference kernels against their OpenMP counterparts.

#include <vector>

#include <benchmark/benchmark.h>

#include "seqlora/kernels.hpp"
#include "seqlora/linalg.hpp"
#include "seqlora/rng.hpp"
#include "seqlora/theory.hpp"

using namespace seqlora;

namespace {

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Matrix a = gaussian_matrix(n, n, rng), b = gaussian_matrix(n, n, rng);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::gemm_parallel(a.data(), b.data(), c, n, n, n);
    } else {
      kernels::gemm_serial(a.data(), b.data(), c, n, n, n);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * n * n * n));
}

template <kernels::Exec E>
void BM_HaarStudy(benchmark::State& state) {
  Rng rng(2);
  const ConceptTask task = make_linear_task(16, 16, SpectrumSpec::geometric(0.8), 0.0, rng);
  BasisRegistry reg(0, 16);
  reg.append(haar_frame(16, 6, rng));
  const auto trials = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    Rng r(3);
    benchmark::DoNotOptimize(optimal_basis_study(task.sigma, reg, 3, trials, r, E).mc_mean_captured);
  }
}

template <kernels::Exec E>
void BM_HansonWright(benchmark::State& state) {
  Rng rng(4);
  const Matrix c = gaussian_matrix(16, 16, rng, 0.3);
  const auto samples = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    Rng r(5);
    benchmark::DoNotOptimize(
        hw_crosstalk_study(Matrix::identity(16), Matrix::identity(1), c, samples, {0.05}, {1.0}, r,
                           EntrySampler::gaussian, E)
            .empirical_mean);
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_HaarStudy<kernels::Exec::serial>)->Name("haar_mc/serial")->Arg(10000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_HaarStudy<kernels::Exec::parallel>)->Name("haar_mc/parallel")->Arg(10000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_HansonWright<kernels::Exec::serial>)->Name("hw_mc/serial")->Arg(20000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_HansonWright<kernels::Exec::parallel>)->Name("hw_mc/parallel")->Arg(20000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
