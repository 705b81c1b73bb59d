#include "icl/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace icl::numkit {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape " + shape_str(a) + " vs " + shape_str(b));
  }
}

void require_same_length(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(what) + ": length " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::column(std::span<const double> v) {
  return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
}

Vector Matrix::col(std::size_t c) const {
  Vector out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

void Matrix::set_col(std::size_t c, std::span<const double> v) {
  if (v.size() != rows_) throw ShapeError("set_col: length mismatch");
  for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v[r];
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix Matrix::cols_range(std::size_t first, std::size_t count) const {
  if (first + count > cols_) throw ShapeError("cols_range: out of bounds");
  Matrix out(rows_, count);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = (*this)(r, first + c);
  return out;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a) + " x " + shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  return out;
}

Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (double& x : out.data()) x *= s;
  return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) m = std::max(m, std::abs(ad[i] - bd[i]));
  return m;
}

double frobenius_norm(const Matrix& a) { return norm(a.data()); }

Vector matvec(const Matrix& a, std::span<const double> x) {
  if (x.size() != a.cols()) throw ShapeError("matvec: " + shape_str(a) + " x " + std::to_string(x.size()));
  Vector y(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) y[r] = dot(a.row(r), x);
  return y;
}

Vector matvec_t(const Matrix& a, std::span<const double> x) {
  if (x.size() != a.rows()) throw ShapeError("matvec_t: " + shape_str(a) + "^T x " + std::to_string(x.size()));
  Vector y(a.cols(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) axpy(x[r], a.row(r), y);
  return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ShapeError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Vector add(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "add");
  Vector out(a.begin(), a.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Vector subtract(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "subtract");
  Vector out(a.begin(), a.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Vector scaled(std::span<const double> a, double s) {
  Vector out(a.begin(), a.end());
  for (double& x : out) x *= s;
  return out;
}

Vector softmax_row(std::span<const double> v) {
  if (v.empty()) throw ShapeError("softmax_row: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  Vector out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

double log_sum_exp(std::span<const double> v) {
  if (v.empty()) throw ShapeError("log_sum_exp: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - mx);
  return mx + std::log(sum);
}

SymmetricEigen symmetric_eigen(const Matrix& input) {
  const std::size_t n = input.rows();
  if (input.cols() != n) throw ShapeError("symmetric_eigen: matrix is " + shape_str(input));
  Matrix a = input;
  Matrix v = Matrix::identity(n);

  double total = 0.0;
  for (double x : a.data()) total += x * x;
  const double tol = 1e-30 * std::max(total, 1e-300);

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off <= tol) break;

    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

  SymmetricEigen out{Vector(n), Matrix(n, n)};
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = v(k, order[j]);
  }
  return out;
}

Vector singular_values(const Matrix& input) {
  // Orthogonalize the columns of the taller orientation.
  Matrix a = input.rows() >= input.cols() ? input : input.transpose();
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  constexpr double eps = 1e-15;

  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
          alpha += a(k, p) * a(k, p);
          beta += a(k, q) * a(k, q);
          gamma += a(k, p) * a(k, q);
        }
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t k = 0; k < m; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
      }
    }
    if (!rotated) break;
  }

  Vector sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < m; ++k) s += a(k, j) * a(k, j);
    sv[j] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

Vector column_mean(const Matrix& a) {
  Vector mean(a.cols(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) axpy(1.0, a.row(r), mean);
  if (a.rows() > 0)
    for (double& x : mean) x /= static_cast<double>(a.rows());
  return mean;
}

Matrix orthonormalize_columns(const Matrix& a) {
  Matrix q = a;
  const std::size_t n = a.cols();
  for (std::size_t j = 0; j < n; ++j) {
    Vector v = q.col(j);
    const double original = norm(v);
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < j; ++i) {
        Vector qi = q.col(i);
        axpy(-dot(qi, v), qi, v);
      }
    }
    const double nv = norm(v);
    if (original == 0.0 || nv <= 1e-10 * original) {
      throw RankError("orthonormalize_columns: column " + std::to_string(j) + " is linearly dependent");
    }
    for (double& x : v) x /= nv;
    q.set_col(j, v);
  }
  return q;
}

PcaResult pca(const Matrix& vectors, bool center) {
  const std::size_t n = vectors.rows();
  const std::size_t dim = vectors.cols();
  if (n < 2) throw InsufficientDataError("pca: need at least 2 vectors, got " + std::to_string(n));

  PcaResult out;
  out.mean = center ? column_mean(vectors) : Vector(dim, 0.0);
  Matrix x = vectors;
  if (center)
    for (std::size_t r = 0; r < n; ++r) axpy(-1.0, out.mean, x.row(r));

  // Work with whichever of the Gram (n x n) or scatter (dim x dim) matrix is smaller.
  const bool use_gram = n < dim;
  const Matrix xt = x.transpose();
  const Matrix m = use_gram ? matmul(x, xt) : matmul(xt, x);
  const SymmetricEigen eig = symmetric_eigen(m);

  const double top = eig.values.empty() ? 0.0 : eig.values.front();
  std::size_t rank = 0;
  while (rank < eig.values.size() && top > 0.0 && eig.values[rank] > 1e-12 * top) ++rank;

  Matrix basis(dim, rank);
  for (std::size_t j = 0; j < rank; ++j) {
    Vector dir;
    if (use_gram) {
      dir = matvec_t(x, eig.vectors.col(j));
    } else {
      dir = eig.vectors.col(j);
    }
    const double nd = norm(dir);
    for (double& v : dir) v /= nd;
    basis.set_col(j, dir);
  }
  // Re-orthonormalize to remove round-off from the Gram route.
  if (rank > 0) basis = orthonormalize_columns(basis);

  double total = 0.0;
  for (double v : eig.values) total += std::max(v, 0.0);
  out.basis = std::move(basis);
  out.eigenvalues.assign(eig.values.begin(), eig.values.begin() + static_cast<std::ptrdiff_t>(rank));
  out.explained_variance_ratio.resize(rank);
  for (std::size_t j = 0; j < rank; ++j) out.explained_variance_ratio[j] = total > 0 ? out.eigenvalues[j] / total : 0.0;
  return out;
}

Matrix lstsq(const Matrix& a_in, const Matrix& b_in) {
  const std::size_t m = a_in.rows();
  const std::size_t n = a_in.cols();
  if (b_in.rows() != m) throw ShapeError("lstsq: a is " + shape_str(a_in) + ", b is " + shape_str(b_in));
  if (m < n) throw ShapeError("lstsq: underdetermined system " + shape_str(a_in));

  Matrix a = a_in;
  Matrix b = b_in;
  Vector diag(n);
  for (std::size_t j = 0; j < n; ++j) {
    double nrm = 0.0;
    for (std::size_t i = j; i < m; ++i) nrm += a(i, j) * a(i, j);
    nrm = std::sqrt(nrm);
    if (nrm == 0.0) {
      diag[j] = 0.0;
      continue;
    }
    const double alpha = a(j, j) > 0 ? -nrm : nrm;
    Vector v(m - j);
    for (std::size_t i = j; i < m; ++i) v[i - j] = a(i, j);
    v[0] -= alpha;
    const double vnorm2 = dot(v, v);
    if (vnorm2 == 0.0) {
      diag[j] = alpha;
      continue;
    }
    auto reflect = [&](Matrix& t) {
      for (std::size_t c = 0; c < t.cols(); ++c) {
        double s = 0.0;
        for (std::size_t i = j; i < m; ++i) s += v[i - j] * t(i, c);
        s = 2.0 * s / vnorm2;
        for (std::size_t i = j; i < m; ++i) t(i, c) -= s * v[i - j];
      }
    };
    reflect(a);
    reflect(b);
    diag[j] = a(j, j);
  }

  double max_diag = 0.0;
  for (double d : diag) max_diag = std::max(max_diag, std::abs(d));
  for (std::size_t j = 0; j < n; ++j) {
    if (max_diag == 0.0 || std::abs(diag[j]) <= 1e-10 * max_diag) {
      throw RankError("lstsq: matrix is rank deficient at column " + std::to_string(j));
    }
  }

  Matrix x(n, b.cols());
  for (std::size_t c = 0; c < b.cols(); ++c) {
    for (std::size_t jj = n; jj-- > 0;) {
      double s = b(jj, c);
      for (std::size_t k = jj + 1; k < n; ++k) s -= a(jj, k) * x(k, c);
      x(jj, c) = s / a(jj, jj);
    }
  }
  return x;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y, "pearson");
  if (x.size() < 2) throw InsufficientDataError("pearson: need at least 2 samples");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateCorrelationError("pearson: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace icl::numkit
