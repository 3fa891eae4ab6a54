// SPDX-License-Identifier: Apache-2.0

#include "seqlora/task.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "seqlora/linalg.hpp"

namespace seqlora {

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::linear_population: return "linear-population";
    case TaskKind::linear_sampled: return "linear-sampled";
    case TaskKind::deep: return "deep";
  }
  return "?";
}

std::string to_string(Activation act) { return act == Activation::tanh ? "tanh" : "identity"; }

TaskKind parse_task_kind(const std::string& s) {
  if (s == "linear-population") return TaskKind::linear_population;
  if (s == "linear-sampled") return TaskKind::linear_sampled;
  if (s == "deep") return TaskKind::deep;
  throw std::invalid_argument(fmt::format(
      "unknown task kind '{}' (expected linear-population, linear-sampled or deep)", s));
}

Activation parse_activation(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument(fmt::format("unknown activation '{}' (expected identity or tanh)", s));
}

std::string to_string(SpectrumSpec::Profile p) {
  switch (p) {
    case SpectrumSpec::Profile::flat: return "flat";
    case SpectrumSpec::Profile::geometric: return "geometric";
    case SpectrumSpec::Profile::spiked: return "spiked";
    case SpectrumSpec::Profile::values: return "values";
  }
  return "?";
}

SpectrumSpec::Profile parse_spectrum_profile(const std::string& s) {
  if (s == "flat") return SpectrumSpec::Profile::flat;
  if (s == "geometric") return SpectrumSpec::Profile::geometric;
  if (s == "spiked") return SpectrumSpec::Profile::spiked;
  if (s == "values") return SpectrumSpec::Profile::values;
  throw std::invalid_argument(
      fmt::format("unknown spectrum profile '{}' (expected flat, geometric, spiked or values)", s));
}

SpectrumSpec SpectrumSpec::flat(double level) {
  SpectrumSpec s;
  s.profile = Profile::flat;
  s.level = level;
  return s;
}

SpectrumSpec SpectrumSpec::geometric(double ratio, double level) {
  SpectrumSpec s;
  s.profile = Profile::geometric;
  s.ratio = ratio;
  s.level = level;
  return s;
}

SpectrumSpec SpectrumSpec::spiked(std::size_t count, double magnitude, double bulk) {
  SpectrumSpec s;
  s.profile = Profile::spiked;
  s.spike_count = count;
  s.spike_magnitude = magnitude;
  s.level = bulk;
  return s;
}

SpectrumSpec SpectrumSpec::from_values(std::vector<double> values) {
  SpectrumSpec s;
  s.profile = Profile::values;
  s.explicit_values = std::move(values);
  return s;
}

std::vector<double> SpectrumSpec::eigenvalues(std::size_t m) const {
  std::vector<double> out(m);
  switch (profile) {
    case Profile::flat:
      std::fill(out.begin(), out.end(), level);
      break;
    case Profile::geometric:
      if (!(ratio > 0.0 && ratio <= 1.0)) {
        throw std::invalid_argument(fmt::format("geometric spectrum ratio must be in (0, 1], got {}", ratio));
      }
      for (std::size_t q = 0; q < m; ++q) out[q] = level * std::pow(ratio, static_cast<double>(q));
      break;
    case Profile::spiked:
      if (spike_count > m) {
        throw std::invalid_argument(fmt::format("spiked spectrum has {} spikes but dimension {}", spike_count, m));
      }
      if (spike_magnitude < level) {
        throw std::invalid_argument("spike magnitude must be at least the bulk level");
      }
      for (std::size_t q = 0; q < m; ++q) out[q] = q < spike_count ? spike_magnitude : level;
      break;
    case Profile::values:
      if (explicit_values.size() != m) {
        throw std::invalid_argument(fmt::format("spectrum lists {} values for dimension {}",
                                                explicit_values.size(), m));
      }
      out = explicit_values;
      break;
  }
  for (std::size_t q = 0; q < m; ++q) {
    if (!(out[q] >= 0.0) || !std::isfinite(out[q])) {
      throw std::invalid_argument(fmt::format("spectrum entry {} is {} (must be finite and >= 0)", q, out[q]));
    }
    if (q > 0 && out[q] > out[q - 1]) {
      throw std::invalid_argument("spectrum entries must be sorted descending");
    }
  }
  return out;
}

namespace {

Matrix rotated_covariance(const SpectrumSpec& spectrum, std::size_t m, Rng& rng) {
  const std::vector<double> values = spectrum.eigenvalues(m);
  Matrix rot;
  if (spectrum.rotation_seed) {
    Rng fixed(*spectrum.rotation_seed);
    rot = haar_frame(m, m, fixed);
  } else {
    rot = haar_frame(m, m, rng);
  }
  Matrix scaled = rot;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) scaled(i, j) *= values[j];
  return symmetrize(matmul_nt(scaled, rot));
}

void fill_covariances(ConceptTask& task, const SpectrumSpec& spectrum, std::size_t m, Rng& rng) {
  task.sigma = rotated_covariance(spectrum, m, rng);
  task.sigma_sqrt = sqrt_spd(task.sigma);
}

Matrix apply_activation(Matrix z, Activation act) {
  if (act == Activation::tanh)
    for (double& v : z.data()) v = std::tanh(v);
  return z;
}

}  // namespace

ConceptTask make_linear_task_with_target(Matrix target, const SpectrumSpec& spectrum,
                                         double noise_std, Rng& rng) {
  if (target.rows() == 0 || target.cols() == 0) throw DimensionError("task dimensions must be >= 1");
  if (!(noise_std >= 0.0)) throw std::invalid_argument("noise_std must be >= 0");
  ConceptTask task;
  task.kind = TaskKind::linear_population;
  fill_covariances(task, spectrum, target.cols(), rng);
  task.target.push_back(std::move(target));
  task.noise_std = noise_std;
  task.gamma = {1.0};
  return task;
}

ConceptTask make_linear_task(std::size_t m, std::size_t n, const SpectrumSpec& spectrum,
                             double noise_std, Rng& rng) {
  if (m == 0 || n == 0) throw DimensionError("task dimensions must be >= 1");
  // Spectrum is validated before any draw so a bad spec fails fast.
  (void)spectrum.eigenvalues(m);
  Rng teacher_rng = rng.split(1);
  Rng cov_rng = rng.split(2);
  rng.next_u64();
  Matrix target = gaussian_matrix(n, m, teacher_rng, 1.0 / std::sqrt(static_cast<double>(m)));
  return make_linear_task_with_target(std::move(target), spectrum, noise_std, cov_rng);
}

std::pair<Matrix, Matrix> sample_batch(const ConceptTask& task, std::size_t p, Rng& rng) {
  if (p == 0) throw DimensionError("sample_batch needs p >= 1");
  const std::size_t m = task.input_dim();
  Matrix z = gaussian_matrix(m, p, rng);
  Matrix x = matmul(task.sigma_sqrt, z);
  if (!task.psi_sqrt.empty()) {
    if (task.psi_sqrt.rows() != p) {
      throw DimensionError(fmt::format("task token covariance is {} but batch has {} columns",
                                       task.psi_sqrt.shape(), p));
    }
    x = matmul(x, task.psi_sqrt);
  }
  Matrix y = task.kind == TaskKind::deep ? network_output(task.target, task.activation, x)
                                         : matmul(task.target.front(), x);
  if (task.noise_std > 0.0) y += gaussian_matrix(y.rows(), p, rng, task.noise_std);
  return {std::move(x), std::move(y)};
}

ConceptTask attach_batch(ConceptTask task, std::size_t p, Rng& rng) {
  auto [x, y] = sample_batch(task, p, rng);
  task.x = std::move(x);
  task.y = std::move(y);
  task.p = p;
  if (task.kind == TaskKind::linear_population) task.kind = TaskKind::linear_sampled;
  return task;
}

double population_loss(const ConceptTask& task, const Matrix& w) {
  const Matrix e = w - task.target.front();
  return frobenius_dot(matmul(e, task.sigma), e) +
         task.noise_std * task.noise_std * static_cast<double>(w.rows());
}

double sampled_loss(const Matrix& w, const Matrix& x, const Matrix& y) {
  const Matrix r = y - matmul(w, x);
  const double fr = frobenius_norm(r);
  return fr * fr / static_cast<double>(x.cols());
}

std::vector<Matrix> forward_activations(const std::vector<Matrix>& weights, Activation act,
                                        const Matrix& x) {
  std::vector<Matrix> h;
  h.reserve(weights.size() + 1);
  h.push_back(x);
  for (std::size_t l = 0; l < weights.size(); ++l) {
    Matrix z = matmul(weights[l], h.back());
    const bool last = l + 1 == weights.size();
    h.push_back(last ? std::move(z) : apply_activation(std::move(z), act));
  }
  return h;
}

Matrix network_output(const std::vector<Matrix>& weights, Activation act, const Matrix& x) {
  return std::move(forward_activations(weights, act, x).back());
}

double deep_loss(const std::vector<Matrix>& weights, Activation act, const Matrix& x,
                 const Matrix& y) {
  const Matrix r = y - network_output(weights, act, x);
  const double fr = frobenius_norm(r);
  return fr * fr / static_cast<double>(x.cols());
}

ConceptTask make_deep_task(const std::vector<Matrix>& base_weights, Activation activation,
                           const std::vector<SpectrumSpec>& spectra, double noise_std,
                           std::size_t p, Rng& rng) {
  if (base_weights.size() < 2) {
    throw DimensionError(fmt::format("deep task needs at least 2 layers, got {}", base_weights.size()));
  }
  if (spectra.size() != base_weights.size()) {
    throw DimensionError(fmt::format("deep task has {} layers but {} spectra", base_weights.size(),
                                     spectra.size()));
  }
  for (std::size_t l = 1; l < base_weights.size(); ++l) {
    if (base_weights[l].cols() != base_weights[l - 1].rows()) {
      throw DimensionError(fmt::format("layer {} weight {} does not chain with layer {} weight {}", l,
                                       base_weights[l].shape(), l - 1, base_weights[l - 1].shape()));
    }
  }
  if (p == 0) throw DimensionError("deep task needs p >= 1");

  ConceptTask task;
  task.kind = TaskKind::deep;
  task.activation = activation;
  task.noise_std = noise_std;
  task.p = p;
  task.gamma.assign(base_weights.size(), 1.0);

  Rng cov_rng = rng.split(1);
  Rng teacher_rng = rng.split(2);
  Rng batch_rng = rng.split(3);
  rng.next_u64();

  for (std::size_t l = 0; l < base_weights.size(); ++l) {
    const std::size_t m = base_weights[l].cols();
    const std::size_t n = base_weights[l].rows();
    Matrix s = rotated_covariance(spectra[l], m, cov_rng);
    if (l == 0) {
      task.sigma = s;
      task.sigma_sqrt = sqrt_spd(s);
    }
    // Normalize to unit mean eigenvalue so the spectrum only shapes directions.
    const double mean_eig = trace(s) / static_cast<double>(m);
    Matrix shape = sqrt_spd(s);
    if (mean_eig > 0.0) shape *= 1.0 / std::sqrt(mean_eig);
    Matrix delta = matmul(gaussian_matrix(n, m, teacher_rng, 1.0 / std::sqrt(static_cast<double>(m))), shape);
    task.target.push_back(base_weights[l] + delta);
  }

  auto [x, y] = sample_batch(task, p, batch_rng);
  task.x = std::move(x);
  task.y = std::move(y);
  auto [xh, yh] = sample_batch(task, p, batch_rng);
  task.x_holdout = std::move(xh);
  task.y_holdout = std::move(yh);
  return task;
}

double estimate_output_lipschitz(ConceptTask& task, const std::vector<Matrix>& weights,
                                 double radius, std::size_t trials, Rng& rng) {
  const Matrix& x = task.x_holdout.empty() ? task.x : task.x_holdout;
  const Matrix& y = task.y_holdout.empty() ? task.y : task.y_holdout;
  if (x.empty()) throw std::invalid_argument("estimate_output_lipschitz needs a stored batch");
  const Matrix out = network_output(weights, task.activation, x);
  const double p = static_cast<double>(x.cols());
  auto f = [&](const Matrix& o) {
    const double n = frobenius_norm(o - y);
    return n * n / p;
  };
  const double f0 = f(out);
  double best = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    Matrix d = gaussian_matrix(out.rows(), out.cols(), rng);
    const double dn = frobenius_norm(d);
    if (dn == 0.0) continue;
    d *= radius * rng.uniform() / dn;
    const double step = frobenius_norm(d);
    if (step == 0.0) continue;
    best = std::max(best, std::abs(f(out + d) - f0) / step);
  }
  task.output_lipschitz = best;
  return best;
}

std::vector<ConceptTask> make_linear_stream(std::size_t count, std::size_t m, std::size_t n,
                                            const std::vector<SpectrumSpec>& spectra,
                                            double noise_std, double mixing, Rng& rng) {
  if (!(mixing >= 0.0 && mixing <= 1.0)) {
    throw std::invalid_argument(fmt::format("teacher mixing must be in [0, 1], got {}", mixing));
  }
  if (spectra.size() != 1 && spectra.size() != count) {
    throw std::invalid_argument(fmt::format("stream of {} concepts needs 1 or {} spectra, got {}", count,
                                            count, spectra.size()));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(m));
  Rng shared_rng = rng.split(0);
  const Matrix shared = gaussian_matrix(n, m, shared_rng, scale);
  std::vector<ConceptTask> stream;
  stream.reserve(count);
  for (std::size_t j = 0; j < count; ++j) {
    Rng concept_rng = rng.split(j + 1);
    Rng teacher_rng = concept_rng.split(1);
    Rng cov_rng = concept_rng.split(2);
    Matrix target = gaussian_matrix(n, m, teacher_rng, scale);
    if (mixing > 0.0) {
      target *= std::sqrt(1.0 - mixing * mixing);
      target += shared * mixing;
    }
    const SpectrumSpec& spec = spectra.size() == 1 ? spectra.front() : spectra[j];
    stream.push_back(make_linear_task_with_target(std::move(target), spec, noise_std, cov_rng));
  }
  rng.next_u64();
  return stream;
}

}  // namespace seqlora
