// SPDX-License-Identifier: Apache-2.0

#include "seqlora/registry.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "seqlora/linalg.hpp"

namespace seqlora {

LoRAFactorPair::LoRAFactorPair(std::size_t layer_index, Matrix a_factor, Matrix b_factor)
    : layer(layer_index), a(std::move(a_factor)), b(std::move(b_factor)) {
  if (a.cols() != b.cols()) {
    throw DimensionError(fmt::format("LoRA factors disagree on rank: A {} vs B {}", a.shape(), b.shape()));
  }
  if (b.cols() == 0) throw DimensionError("LoRA rank must be at least 1");
  if (b.cols() > std::min(a.rows(), b.rows())) {
    throw DimensionError(fmt::format("LoRA rank {} exceeds min(n, m) for A {} and B {}", b.cols(),
                                     a.shape(), b.shape()));
  }
}

Matrix LoRAFactorPair::residual() const { return matmul_nt(a, b); }

BasisRegistry::BasisRegistry(std::size_t layer, std::size_t m, double epsilon)
    : layer_(layer), m_(m), epsilon_(epsilon) {
  if (m == 0) throw DimensionError("registry feature dimension must be positive");
  if (!(epsilon >= 0.0)) throw std::invalid_argument("registry epsilon must be >= 0");
}

std::size_t BasisRegistry::used_rank() const noexcept { return concat_.cols(); }

double BasisRegistry::orthogonality_defect(const Matrix& b) const {
  const double bn = frobenius_norm(b);
  double worst = 0.0;
  if (bn == 0.0) return worst;
  for (const Matrix& stored : bases_) {
    const double denom = frobenius_norm(stored) * bn;
    if (denom == 0.0) continue;
    worst = std::max(worst, frobenius_norm(matmul_tn(stored, b)) / denom);
  }
  return worst;
}

void BasisRegistry::append(const Matrix& b) {
  if (b.rows() != m_) {
    throw DimensionError(fmt::format("basis has {} rows but layer {} has feature dimension {}",
                                     b.rows(), layer_, m_));
  }
  if (b.cols() == 0 || frobenius_norm(b) == 0.0) {
    throw DimensionError("cannot append an empty or zero basis");
  }
  if (used_rank() + b.cols() > m_) {
    throw CapacityError(fmt::format(
        "layer {} capacity exceeded: {} + {} columns > m = {} (at most floor(m/r) = {} concepts of rank {})",
        layer_, used_rank(), b.cols(), m_, m_ / b.cols(), b.cols()));
  }
  const double defect = orthogonality_defect(b);
  if (defect > kAppendOrthogonalityTolerance) {
    throw OrthogonalityError(
        fmt::format("basis violates orthogonality against stored bases: relative defect {:.3e} > {:.1e}",
                    defect, kAppendOrthogonalityTolerance),
        defect);
  }
  bases_.push_back(b);
  concat_ = hconcat(concat_, b);
  orthonormal_ = orthonormalize(concat_);
  cached_projector_.reset();
}

const Matrix& BasisRegistry::projector() const {
  if (cached_projector_) return *cached_projector_;
  Matrix p = Matrix::identity(m_);
  if (!bases_.empty()) {
    Matrix gram = matmul_tn(concat_, concat_);
    for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) += epsilon_;
    Matrix coeff;
    try {
      coeff = spd_solve(gram, concat_.transpose());
    } catch (const NumericalError& e) {
      throw NumericalError(fmt::format(
          "projector Gram solve failed for layer {} with epsilon = {}: {}. B_int is rank deficient; "
          "use a nonzero epsilon",
          layer_, epsilon_, e.what()));
    }
    p -= matmul(concat_, coeff);
    p = symmetrize(p);
  }
  cached_projector_ = std::move(p);
  return *cached_projector_;
}

Matrix BasisRegistry::exact_complement_projector() const {
  Matrix p = Matrix::identity(m_);
  if (!bases_.empty()) p -= projector_from_orthonormal(orthonormal_);
  return p;
}

Matrix BasisRegistry::project(const Matrix& b_tilde) const {
  if (b_tilde.rows() != m_) {
    throw DimensionError(fmt::format("project: matrix has {} rows, registry dimension is {}",
                                     b_tilde.rows(), m_));
  }
  if (bases_.empty()) return b_tilde;
  return matmul(projector(), b_tilde);
}

BasisRegistry append_basis(BasisRegistry reg, const Matrix& b) {
  reg.append(b);
  return reg;
}

Matrix build_projector(const BasisRegistry& reg) { return reg.projector(); }

Matrix project(const BasisRegistry& reg, const Matrix& b_tilde) { return reg.project(b_tilde); }

ComposedModel::ComposedModel(std::vector<Matrix> base_weights) : base_(std::move(base_weights)) {}

const Matrix& ComposedModel::base_weight(std::size_t layer) const {
  if (layer >= base_.size()) throw std::out_of_range(fmt::format("layer {} out of range", layer));
  return base_[layer];
}

void ComposedModel::add_concept(std::vector<LoRAFactorPair> pairs) {
  if (pairs.size() != base_.size()) {
    throw DimensionError(fmt::format("concept has {} factor pairs but model has {} layers",
                                     pairs.size(), base_.size()));
  }
  for (std::size_t l = 0; l < pairs.size(); ++l) {
    const Matrix& w = base_[l];
    if (pairs[l].a.rows() != w.rows() || pairs[l].b.rows() != w.cols()) {
      throw DimensionError(fmt::format("layer {} factors A {} B {} do not match base weight {}", l,
                                       pairs[l].a.shape(), pairs[l].b.shape(), w.shape()));
    }
    pairs[l].layer = l;
  }
  concepts_.push_back(std::move(pairs));
}

const LoRAFactorPair& ComposedModel::factors(std::size_t concept_index, std::size_t layer) const {
  return concept_factors(concept_index).at(layer);
}

const std::vector<LoRAFactorPair>& ComposedModel::concept_factors(std::size_t concept_index) const {
  if (concept_index >= concepts_.size()) {
    throw std::out_of_range(fmt::format("concept {} out of range ({} stored)", concept_index,
                                        concepts_.size()));
  }
  return concepts_[concept_index];
}

Matrix ComposedModel::compose_weight(std::size_t layer, std::size_t upto) const {
  if (upto > concepts_.size()) {
    throw std::out_of_range(fmt::format("compose_weight upto={} exceeds {} stored concepts", upto,
                                        concepts_.size()));
  }
  Matrix w = base_weight(layer);
  for (std::size_t j = 0; j < upto; ++j) w += concepts_[j][layer].residual();
  return w;
}

std::vector<Matrix> ComposedModel::compose_all(std::size_t upto) const {
  std::vector<Matrix> out;
  out.reserve(base_.size());
  for (std::size_t l = 0; l < base_.size(); ++l) out.push_back(compose_weight(l, upto));
  return out;
}

Matrix ComposedModel::crosstalk_operator(std::size_t j, std::size_t layer) const {
  if (j >= concepts_.size()) {
    throw std::out_of_range(fmt::format("crosstalk_operator: concept {} out of range ({} learned)", j,
                                        concepts_.size()));
  }
  const Matrix& w = base_weight(layer);
  Matrix c(w.rows(), w.cols());
  for (std::size_t k = j + 1; k < concepts_.size(); ++k) c += concepts_[k][layer].residual();
  return c;
}

}  // namespace seqlora
