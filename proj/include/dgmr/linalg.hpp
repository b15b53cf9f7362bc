#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace dgmr {

using Vector = std::vector<double>;

/// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  /// Takes ownership of `data`; throws DimensionError unless its length is rows*cols.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  std::string shape_string() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);
double frobenius_norm(const Matrix& m);
Matrix transpose(const Matrix& m);

/// a * b. Rows of the result are computed in parallel; every entry uses the
/// same k-ascending summation order as serial::matmul, so results are
/// bit-identical to it.
Matrix matmul(const Matrix& a, const Matrix& b);

/// a * b^T without materializing the transpose.
Matrix matmul_transposed(const Matrix& a, const Matrix& b);

/// Euclidean norm of every row.
Vector row_l2_norms(const Matrix& m);

/// Gram-Schmidt step: removes the component along row `j` from every row.
///
/// Row j itself ends up exactly zero. Throws DegeneratePivotError when
/// ||v_j||^2 <= eps.
Matrix eliminate_component(const Matrix& v_set, std::size_t j, double eps);
void eliminate_component_inplace(Matrix& v_set, std::size_t j, double eps);

/// Eigenvalues of a symmetric matrix in descending order (cyclic Jacobi).
Vector sym_eig_descending(const Matrix& s);

/// Sequential reference kernels. Kept for testing and benchmarking the
/// parallel versions above.
namespace serial {

Matrix matmul(const Matrix& a, const Matrix& b);
Vector row_l2_norms(const Matrix& m);

}  // namespace serial

}  // namespace dgmr
