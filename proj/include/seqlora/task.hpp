// SPDX-License-Identifier: Apache-2.0
//
// Synthetic concept streams: least-squares regression onto a teacher, either
// in closed form over a Gaussian input model, on a stored sample batch, or
// through a small multi-layer network.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "seqlora/matrix.hpp"
#include "seqlora/rng.hpp"

namespace seqlora {

enum class TaskKind { linear_population, linear_sampled, deep };
enum class Activation { identity, tanh };

std::string to_string(TaskKind kind);
std::string to_string(Activation act);
TaskKind parse_task_kind(const std::string& s);
Activation parse_activation(const std::string& s);

/// Eigenvalue profile of an input covariance.
struct SpectrumSpec {
  enum class Profile { flat, geometric, spiked, values };

  Profile profile = Profile::flat;
  double level = 1.0;           // flat: every eigenvalue; spiked: the bulk value
  double ratio = 0.5;           // geometric: λ_q = level·ratio^q
  std::size_t spike_count = 1;  // spiked: leading eigenvalues set to spike_magnitude
  double spike_magnitude = 10.0;
  std::vector<double> explicit_values;  // values: taken as-is
  /// Fixes the eigenbasis rotation; otherwise it is drawn from the task rng.
  std::optional<std::uint64_t> rotation_seed;

  static SpectrumSpec flat(double level = 1.0);
  static SpectrumSpec geometric(double ratio, double level = 1.0);
  static SpectrumSpec spiked(std::size_t count, double magnitude, double bulk = 1.0);
  static SpectrumSpec from_values(std::vector<double> values);

  /// Descending eigenvalues of length m; throws std::invalid_argument when
  /// the profile is malformed (negative, unsorted, wrong length).
  std::vector<double> eigenvalues(std::size_t m) const;

  bool operator==(const SpectrumSpec&) const = default;
};

std::string to_string(SpectrumSpec::Profile p);
SpectrumSpec::Profile parse_spectrum_profile(const std::string& s);

/// One concept. For linear kinds `target` has one n×m entry; deep tasks hold
/// one target per layer and evaluate through the network.
struct ConceptTask {
  TaskKind kind = TaskKind::linear_population;
  std::vector<Matrix> target;
  Matrix sigma;       // input covariance (m×m)
  Matrix sigma_sqrt;  // Σ^{1/2}
  Matrix psi;         // token covariance (p×p)
  Matrix psi_sqrt;
  double noise_std = 0.0;
  std::size_t p = 0;
  Activation activation = Activation::identity;
  std::vector<double> gamma;  // per-layer activation Lipschitz constants

  // Training batch (sampled and deep kinds) and a held-out batch (deep).
  Matrix x, y;
  Matrix x_holdout, y_holdout;

  /// Output-loss Lipschitz estimate from random output perturbations;
  /// filled by estimate_output_lipschitz.
  std::optional<double> output_lipschitz;

  std::size_t layers() const noexcept { return target.size(); }
  std::size_t input_dim() const { return target.front().cols(); }
  std::size_t output_dim() const { return target.back().rows(); }
};

/// Teacher W* with N(0, 1/m) entries, Σ = R·diag(λ)·Rᵀ with a Haar rotation R.
/// Population kind; call attach_batch to get a sampled task.
ConceptTask make_linear_task(std::size_t m, std::size_t n, const SpectrumSpec& spectrum,
                             double noise_std, Rng& rng);

/// Same, with an explicit teacher (used for correlated streams).
ConceptTask make_linear_task_with_target(Matrix target, const SpectrumSpec& spectrum,
                                         double noise_std, Rng& rng);

/// X = Σ^{1/2} Z Ψ^{1/2}, Y = W*X + noise_std·N for standard Gaussian Z, N.
/// Deep tasks push X through the teacher network.
std::pair<Matrix, Matrix> sample_batch(const ConceptTask& task, std::size_t p, Rng& rng);

/// Stores a training batch of p columns and switches a population task to the
/// sampled kind.
ConceptTask attach_batch(ConceptTask task, std::size_t p, Rng& rng);

/// Population risk Tr((W−W*)Σ(W−W*)ᵀ) + noise_std²·n.
double population_loss(const ConceptTask& task, const Matrix& w);
/// Empirical ‖Y − W·X‖_F² / p.
double sampled_loss(const Matrix& w, const Matrix& x, const Matrix& y);

/// Teacher network W0^(ℓ) + Δ^(ℓ). Δ^(ℓ) has N(0, 1/m) entries reshaped by
/// spectra[ℓ] on its input side; spectra[0] is also the input covariance.
/// Train and held-out batches of p columns are sampled immediately.
ConceptTask make_deep_task(const std::vector<Matrix>& base_weights, Activation activation,
                           const std::vector<SpectrumSpec>& spectra, double noise_std,
                           std::size_t p, Rng& rng);

/// Layer inputs h_0..h_{L-1} and output h_L of the network with the given
/// weights; the last layer is linear.
std::vector<Matrix> forward_activations(const std::vector<Matrix>& weights, Activation act,
                                        const Matrix& x);
Matrix network_output(const std::vector<Matrix>& weights, Activation act, const Matrix& x);
double deep_loss(const std::vector<Matrix>& weights, Activation act, const Matrix& x,
                 const Matrix& y);

/// Max ratio |f(O + δ) − f(O)| / ‖δ‖_F of f(O) = ‖O − Y‖²/p over `trials`
/// random perturbations of size up to `radius` around the output of `weights`
/// on the held-out batch. Stored in task.output_lipschitz.
double estimate_output_lipschitz(ConceptTask& task, const std::vector<Matrix>& weights,
                                 double radius, std::size_t trials, Rng& rng);

/// Stream of T linear tasks. Teachers are mixed as
///   W*_j = √(1−c²)·G_j + c·G_shared
/// with c = mixing, so c = 0 gives independent teachers.
std::vector<ConceptTask> make_linear_stream(std::size_t count, std::size_t m, std::size_t n,
                                            const std::vector<SpectrumSpec>& spectra,
                                            double noise_std, double mixing, Rng& rng);

}  // namespace seqlora
