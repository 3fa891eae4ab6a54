// SPDX-License-Identifier: Apache-2.0
//
// LoRA factors, the per-layer frozen-basis memory with its regularized
// projector, composed weights and crosstalk operators.

#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

#include "seqlora/matrix.hpp"

namespace seqlora {

/// Thrown when a layer cannot hold another basis (Σ r_j would exceed m).
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when a basis handed to the registry is not orthogonal to the
/// stored ones.
class OrthogonalityError : public std::runtime_error {
 public:
  OrthogonalityError(const std::string& what, double defect)
      : std::runtime_error(what), defect_(defect) {}
  double defect() const noexcept { return defect_; }

 private:
  double defect_;
};

inline constexpr double kDefaultEpsilon = 1e-8;
inline constexpr double kAppendOrthogonalityTolerance = 1e-6;

/// One concept's residual A·Bᵀ at one layer; a is n×r, b is m×r.
struct LoRAFactorPair {
  std::size_t layer = 0;
  Matrix a;
  Matrix b;

  LoRAFactorPair() = default;
  LoRAFactorPair(std::size_t layer, Matrix a, Matrix b);

  std::size_t rank() const noexcept { return b.cols(); }
  Matrix residual() const;  // A·Bᵀ
};

/// Frozen bases B_1..B_t of one layer and the projector onto the complement
/// of their span. Append-only; the projector is rebuilt lazily.
class BasisRegistry {
 public:
  BasisRegistry(std::size_t layer, std::size_t m, double epsilon = kDefaultEpsilon);

  std::size_t layer() const noexcept { return layer_; }
  std::size_t dim() const noexcept { return m_; }
  double epsilon() const noexcept { return epsilon_; }
  std::size_t size() const noexcept { return bases_.size(); }
  bool empty() const noexcept { return bases_.empty(); }
  const std::vector<Matrix>& bases() const noexcept { return bases_; }
  std::size_t used_rank() const noexcept;
  std::size_t free_dim() const noexcept { return m_ - used_rank(); }

  /// Concatenation B_int = [B_1, ..., B_t] (m×Σr_j); empty when no bases.
  const Matrix& concatenated() const noexcept { return concat_; }
  /// Orthonormal basis of col(B_int); used for defect measurement.
  const Matrix& orthonormal_span() const noexcept { return orthonormal_; }

  /// Largest relative defect ‖B_jᵀb‖_F / (‖B_j‖_F‖b‖_F) over stored bases.
  double orthogonality_defect(const Matrix& b) const;

  /// Appends b after checking capacity and orthogonality.
  void append(const Matrix& b);

  /// P = I − B_int(B_intᵀB_int + εI)⁻¹B_intᵀ, or I for an empty registry.
  const Matrix& projector() const;
  /// Exact complement projector I − QQᵀ from the orthonormal span.
  Matrix exact_complement_projector() const;

  /// P·b̃, the Frobenius-nearest feasible matrix to b̃.
  Matrix project(const Matrix& b_tilde) const;

 private:
  std::size_t layer_;
  std::size_t m_;
  double epsilon_;
  std::vector<Matrix> bases_;
  Matrix concat_;
  Matrix orthonormal_;
  mutable std::optional<Matrix> cached_projector_;
};

/// Functional form of BasisRegistry::append.
BasisRegistry append_basis(BasisRegistry reg, const Matrix& b);
Matrix build_projector(const BasisRegistry& reg);
Matrix project(const BasisRegistry& reg, const Matrix& b_tilde);

/// Base weights per layer and the factor pairs of every learned concept.
class ComposedModel {
 public:
  ComposedModel() = default;
  explicit ComposedModel(std::vector<Matrix> base_weights);

  std::size_t layer_count() const noexcept { return base_.size(); }
  std::size_t concept_count() const noexcept { return concepts_.size(); }
  const Matrix& base_weight(std::size_t layer) const;
  const std::vector<Matrix>& base_weights() const noexcept { return base_; }

  /// Adds one concept's factors, one pair per layer in layer order.
  void add_concept(std::vector<LoRAFactorPair> pairs);
  const LoRAFactorPair& factors(std::size_t concept_index, std::size_t layer) const;
  const std::vector<LoRAFactorPair>& concept_factors(std::size_t concept_index) const;

  /// W₀ + Σ_{j<upto} A_j B_jᵀ at the given layer.
  Matrix compose_weight(std::size_t layer, std::size_t upto) const;
  std::vector<Matrix> compose_all(std::size_t upto) const;

  /// C_j = Σ_{k>j} A_k B_kᵀ at the given layer (0-based concept index).
  Matrix crosstalk_operator(std::size_t j, std::size_t layer) const;

 private:
  std::vector<Matrix> base_;
  std::vector<std::vector<LoRAFactorPair>> concepts_;
};

inline Matrix compose_weight(const ComposedModel& model, std::size_t layer, std::size_t upto) {
  return model.compose_weight(layer, upto);
}
inline Matrix crosstalk_operator(const ComposedModel& model, std::size_t j, std::size_t layer) {
  return model.crosstalk_operator(j, layer);
}

}  // namespace seqlora
