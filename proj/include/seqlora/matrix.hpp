// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major double matrix used for every weight, covariance and
// projector in the library.

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace seqlora {

/// Thrown when operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a numerical routine meets a degenerate input
/// (non-positive pivot, significantly negative eigenvalue, non-finite loss).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols_, cols_};
  }

  Matrix transpose() const;
  Matrix column(std::size_t j) const;
  Matrix columns(std::size_t first, std::size_t count) const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s) noexcept;

  bool operator==(const Matrix& other) const = default;

  std::string shape() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);

/// Matrix product a*b; uses the OpenMP kernel for large operands.
Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ*b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a*bᵀ without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

/// Horizontal concatenation [a, b].
Matrix hconcat(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& m);
double frobenius_dot(const Matrix& a, const Matrix& b);
double trace(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& m);
bool all_finite(const Matrix& m);
Matrix symmetrize(const Matrix& m);

void require_same_shape(const Matrix& a, const Matrix& b, const char* what);

}  // namespace seqlora
