#pragma once

// Small dense linear-algebra kernel used by the analysis modules.
// Everything is row-major and 64-bit.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace icl::numkit {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct InsufficientDataError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct RankError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DegenerateCorrelationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  /// Single column built from `v`.
  static Matrix column(std::span<const double> v);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  Vector col(std::size_t c) const;
  void set_col(std::size_t c, std::span<const double> v);

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  Matrix transpose() const;
  /// Columns [first, first + count).
  Matrix cols_range(std::size_t first, std::size_t count) const;

  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
double max_abs_diff(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& a);

/// y = A x
Vector matvec(const Matrix& a, std::span<const double> x);
/// y = A^T x
Vector matvec_t(const Matrix& a, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
Vector add(std::span<const double> a, std::span<const double> b);
Vector subtract(std::span<const double> a, std::span<const double> b);
Vector scaled(std::span<const double> a, double s);

/// Numerically stable softmax (max-shifted).
Vector softmax_row(std::span<const double> v);
double log_sum_exp(std::span<const double> v);

struct SymmetricEigen {
  Vector values;   // descending
  Matrix vectors;  // column j pairs with values[j]
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
SymmetricEigen symmetric_eigen(const Matrix& a);

/// Singular values (descending) by one-sided Jacobi; small values keep
/// relative accuracy, unlike sqrt(eig(A^T A)).
Vector singular_values(const Matrix& a);

struct PcaResult {
  Matrix basis;                    // dim x r, orthonormal columns
  Vector explained_variance_ratio; // length r, nonincreasing
  Vector eigenvalues;              // length r
  Vector mean;                     // zeros when not centered
};

/// PCA over the rows of `vectors`. Components with eigenvalue below
/// 1e-13 of the largest are dropped, so r is the numerical rank.
PcaResult pca(const Matrix& vectors, bool center);

/// Least-squares solution of a x = b (Householder QR).
Matrix lstsq(const Matrix& a, const Matrix& b);

double pearson(std::span<const double> x, std::span<const double> y);

Vector column_mean(const Matrix& a);

/// Orthonormalize the columns of `a` (modified Gram-Schmidt, two passes).
/// Throws RankError if a column is dependent on the previous ones.
Matrix orthonormalize_columns(const Matrix& a);

}  // namespace icl::numkit
