#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "icl/numkit.hpp"
#include "test_util.hpp"

using namespace icl::numkit;
using testutil::random_matrix;
using testutil::random_vector;

namespace {

using LMat = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;

LMat to_long(const Matrix& m) {
  LMat out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

}  // namespace

TEST_CASE("matmul agrees with a triple loop") {
  const auto a = random_matrix(7, 5, 1);
  const auto b = random_matrix(5, 9, 2);
  const auto c = matmul(a, b);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 9; ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      CHECK(std::abs(c(i, j) - static_cast<double>(s)) < 1e-13);
    }
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("matvec and transpose") {
  const auto a = random_matrix(4, 6, 3);
  const auto x = random_vector(6, 4);
  const auto y = random_vector(4, 5);
  const auto ax = matvec(a, x);
  const auto aty = matvec_t(a, y);
  CHECK(std::abs(dot(ax, y) - dot(x, aty)) < 1e-12);
  CHECK(max_abs_diff(a.transpose().transpose(), a) == 0.0);
}

TEST_CASE("softmax matches an extended-precision oracle and survives large inputs") {
  const Vector v{1000.0, 999.0, -5.0, 0.5, 1000.0};
  const auto p = softmax_row(v);
  long double z = 0;
  for (double x : v) z += std::exp(static_cast<long double>(x) - 1000.0L);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const long double expected = std::exp(static_cast<long double>(v[i]) - 1000.0L) / z;
    CHECK(std::abs(p[i] - static_cast<double>(expected)) < 1e-15);
  }
  CHECK(std::abs(log_sum_exp(v) - static_cast<double>(1000.0L + std::log(z))) < 1e-12);
}

TEST_CASE("symmetric eigen decomposition") {
  const auto g = random_matrix(6, 6, 7);
  const auto a = add(g, g.transpose());
  const auto e = symmetric_eigen(a);
  for (std::size_t j = 0; j + 1 < e.values.size(); ++j) CHECK(e.values[j] >= e.values[j + 1]);
  for (std::size_t j = 0; j < 6; ++j) {
    const auto v = e.vectors.col(j);
    const auto av = matvec(a, v);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(av[i] - e.values[j] * v[i]) < 1e-10);
  }
}

TEST_CASE("singular values match Eigen in long double") {
  const auto a = random_matrix(9, 4, 11);
  const auto sv = singular_values(a);
  Eigen::JacobiSVD<LMat> svd(to_long(a));
  const auto ref = svd.singularValues();
  REQUIRE(sv.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(std::abs(sv[static_cast<std::size_t>(i)] - static_cast<double>(ref(i))) < 1e-12);
}

TEST_CASE("pca explained variance matches an extended-precision oracle") {
  const auto x = random_matrix(30, 12, 13);
  for (bool center : {true, false}) {
    const auto p = pca(x, center);
    LMat xl = to_long(x);
    if (center) xl.rowwise() -= xl.colwise().mean();
    const LMat cov = xl.transpose() * xl;
    Eigen::SelfAdjointEigenSolver<LMat> es(cov);
    const auto ev = es.eigenvalues().reverse();
    const long double total = ev.sum();
    for (std::size_t j = 0; j < p.explained_variance_ratio.size(); ++j) {
      CHECK(std::abs(p.explained_variance_ratio[j] - static_cast<double>(ev(static_cast<Eigen::Index>(j)) / total)) <
            1e-8);
    }
    const auto btb = matmul(p.basis.transpose(), p.basis);
    CHECK(max_abs_diff(btb, Matrix::identity(p.basis.cols())) < 1e-10);
  }
}

TEST_CASE("pca of rank-deficient data reports the numerical rank") {
  const auto a = random_matrix(20, 2, 17);
  const auto b = random_matrix(2, 10, 18);
  const auto p = pca(matmul(a, b), true);
  CHECK(p.basis.cols() == 2);
}

TEST_CASE("lstsq agrees with long-double normal equations") {
  const auto a = random_matrix(25, 5, 19);
  const auto b = random_matrix(25, 2, 20);
  const auto x = lstsq(a, b);
  const LMat al = to_long(a);
  const LMat ref = (al.transpose() * al).ldlt().solve(al.transpose() * to_long(b));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(x(i, j) - static_cast<double>(ref(i, j))) < 1e-11);

  Matrix dep = a;
  for (std::size_t i = 0; i < dep.rows(); ++i) dep(i, 4) = 2.0 * dep(i, 1);
  CHECK_THROWS_AS(lstsq(dep, b), RankError);
}

TEST_CASE("pearson matches the direct formula") {
  const auto x = random_vector(50, 21);
  auto y = random_vector(50, 22);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += 0.5 * x[i];
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < 50; ++i) mx += x[i], my += y[i];
  mx /= 50, my /= 50;
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  CHECK(std::abs(pearson(x, y) - static_cast<double>(sxy / std::sqrt(sxx * syy))) < 1e-14);
  CHECK(pearson(x, x) == doctest::Approx(1.0));
  CHECK_THROWS_AS(pearson(x, Vector(50, 3.0)), DegenerateCorrelationError);
  CHECK_THROWS_AS(pearson(Vector{1.0}, Vector{2.0}), InsufficientDataError);
}

TEST_CASE("orthonormalize columns") {
  const auto a = random_matrix(10, 4, 23);
  const auto q = orthonormalize_columns(a);
  CHECK(max_abs_diff(matmul(q.transpose(), q), Matrix::identity(4)) < 1e-14);
  Matrix dep = a;
  for (std::size_t i = 0; i < 10; ++i) dep(i, 3) = dep(i, 0) - dep(i, 2);
  CHECK_THROWS_AS(orthonormalize_columns(dep), RankError);
}

TEST_CASE("column mean and shape checks") {
  const Matrix m{{1, 2}, {3, 4}, {5, 9}};
  const auto mu = column_mean(m);
  CHECK(mu[0] == doctest::Approx(3.0));
  CHECK(mu[1] == doctest::Approx(5.0));
  CHECK_THROWS_AS(add(m, Matrix(2, 2)), ShapeError);
  CHECK_THROWS_AS(dot(Vector{1, 2}, Vector{1}), ShapeError);
  CHECK_THROWS_AS(pca(Matrix(1, 3), true), InsufficientDataError);
}
