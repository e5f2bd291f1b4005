#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include <Eigen/SVD>

#include "dast/covariance.hpp"
#include "dast/rng.hpp"

using namespace dast;

namespace {

// brute-force determinant by cofactor expansion, for small matrices only
double det_bruteforce(const Matrix& a) {
  const int n = static_cast<int>(a.rows());
  if (n == 1) return a(0, 0);
  double total = 0.0;
  int sign = 1;
  for (int j = 0; j < n; ++j) {
    Matrix minor(n - 1, n - 1);
    for (int r = 1; r < n; ++r) {
      int cc = 0;
      for (int c = 0; c < n; ++c) {
        if (c == j) continue;
        minor(r - 1, cc++) = a(r, c);
      }
    }
    total += sign * a(0, j) * det_bruteforce(minor);
    sign = -sign;
  }
  return total;
}

}  // namespace

TEST_CASE("exponential correlation endpoints") {
  CHECK(exp_corr(0.0, 3.0) == 1.0);
  CHECK_THAT(exp_corr(3.0, 3.0), Catch::Matchers::WithinAbs(0.367879441, 1e-9));
  CHECK(exp_corr(1e6, 1.0) >= 0.0);
  CHECK(exp_corr(1e6, 1.0) < 1e-300);
  CHECK_THROWS(exp_corr(-1.0, 1.0));
}

TEST_CASE("Matern correlation at zero lag and for nu = 1/2") {
  CHECK(matern_corr(0.0, 0.7, 0.5) == 1.0);
  CHECK(matern_corr(0.0, 0.7, 2.3) == 1.0);
  CHECK_THAT(matern_corr(0.2, 0.2, 0.5),
             Catch::Matchers::WithinAbs(std::exp(-1.0), 1e-12));
}

TEST_CASE("Matern nu = 1/2 equals the exponential on a log-spaced grid") {
  double phi = 0.37;
  for (int i = 0; i <= 120; ++i) {
    double h = phi * std::pow(10.0, -3.0 + 6.0 * i / 120.0);
    INFO("h/phi = " << h / phi);
    CHECK_THAT(matern_corr(h, phi, 0.5),
               Catch::Matchers::WithinAbs(exp_corr(h, phi), 1e-12));
  }
}

TEST_CASE("Matern nu = 3/2 matches the closed form (1 + h/phi) exp(-h/phi)") {
  double phi = 1.4;
  for (double h : {0.01, 0.5, 1.4, 3.0, 10.0}) {
    double x = h / phi;
    CHECK_THAT(matern_corr(h, phi, 1.5),
               Catch::Matchers::WithinAbs((1.0 + x) * std::exp(-x), 1e-12));
  }
}

TEST_CASE("covariance assembly: single point, coincident pair, exp entry") {
  MaternSpec spec{2.5, 0.3, 0.5};
  Matrix one = build_cov({{{0, 0}, 0}}, CovSpec{spec}, 1e-6);
  REQUIRE(one.rows() == 1);
  CHECK_THAT(one(0, 0), Catch::Matchers::WithinAbs(2.5 + 1e-6, 1e-15));

  Matrix coincident =
      build_cov({{{1, 1}, 0}, {{1, 1}, 0}}, CovSpec{spec}, 0.0);
  CHECK(coincident(0, 1) == coincident(0, 0));  // perfect correlation
  Eigen::JacobiSVD<Matrix> svd(coincident);
  CHECK(svd.singularValues()(1) < 1e-12 * svd.singularValues()(0));

  MaternSpec unit{1.0, 0.2, 0.5};
  Matrix two = build_cov({{{0, 0}, 0}, {{0.2, 0}, 0}}, CovSpec{unit}, 0.0);
  CHECK_THAT(two(0, 1), Catch::Matchers::WithinAbs(std::exp(-1.0), 1e-12));
}

TEST_CASE("covariance matrices are symmetric to bit equality") {
  Rng rng(11);
  std::vector<PointTime> pts;
  for (int i = 0; i < 25; ++i)
    pts.push_back({{rng.uniform(0, 100), rng.uniform(0, 100)},
                   static_cast<double>(rng.below(5))});
  Matrix sp = build_cov(pts, CovSpec{MaternSpec{1.7, 12.0, 1.5}}, 1e-8);
  Matrix st = build_cov(pts, CovSpec{SeparableSpec{0.8, 20.0, 2.0}}, 0.0);
  for (int i = 0; i < sp.rows(); ++i)
    for (int j = 0; j < sp.cols(); ++j) {
      CHECK(sp(i, j) == sp(j, i));
      CHECK(st(i, j) == st(j, i));
    }
}

TEST_CASE("separable covariance converges to spatial as psi_t grows") {
  Rng rng(3);
  std::vector<PointTime> pts;
  for (int i = 0; i < 10; ++i)
    pts.push_back({{rng.uniform(0, 10), rng.uniform(0, 10)},
                   static_cast<double>(rng.below(4))});
  Matrix spatial = build_cov(pts, CovSpec{MaternSpec{1.3, 2.0, 0.5}}, 0.0);
  Matrix st = build_cov(pts, CovSpec{SeparableSpec{1.3, 2.0, 1e9}}, 0.0);
  CHECK((st - spatial).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("Cholesky solves and log-determinant") {
  Matrix eye = Matrix::Identity(4, 4);
  Vector b(4);
  b << 1, -2, 3, 0.5;
  CHECK((chol_solve(eye, b) - b).lpNorm<Eigen::Infinity>() == 0.0);

  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = d(1, 1) = 2.0;
  Vector b2(2);
  b2 << 4, 6;
  Vector sol = chol_solve(d, b2);
  CHECK_THAT(sol(0), Catch::Matchers::WithinAbs(2.0, 1e-14));
  CHECK_THAT(sol(1), Catch::Matchers::WithinAbs(3.0, 1e-14));

  Rng rng(5);
  Matrix a = Matrix::NullaryExpr(5, 5, [&](Eigen::Index, Eigen::Index) {
    return rng.normal();
  });
  Matrix spd = a * a.transpose() + 5.0 * Matrix::Identity(5, 5);
  Vector rhs(5);
  for (int i = 0; i < 5; ++i) rhs[i] = rng.normal();
  Vector x = chol_solve(spd, rhs);
  CHECK((spd * x - rhs).lpNorm<Eigen::Infinity>() < 1e-10);
}

TEST_CASE("log-determinant matches brute force up to 6x6") {
  Rng rng(17);
  for (int n = 1; n <= 6; ++n) {
    Matrix a = Matrix::NullaryExpr(n, n, [&](Eigen::Index, Eigen::Index) {
      return rng.normal();
    });
    Matrix spd = a * a.transpose() + n * Matrix::Identity(n, n);
    CholFactor chol(spd);
    double expected = std::log(det_bruteforce(spd));
    CHECK_THAT(chol.log_det() / expected,
               Catch::Matchers::WithinAbs(1.0, 1e-8));
    // diagonal identity: logdet = 2 sum log L_ii
    double from_diag = 0.0;
    Matrix l = chol.matrix_l();
    for (int i = 0; i < n; ++i) from_diag += 2.0 * std::log(l(i, i));
    CHECK_THAT(chol.log_det(), Catch::Matchers::WithinAbs(from_diag, 1e-12));
  }
}

TEST_CASE("factorisation failure names the leading minor") {
  Matrix bad = Matrix::Identity(3, 3);
  bad(1, 1) = -1.0;
  try {
    CholFactor f(bad);
    FAIL("expected failure");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("leading minor 2") != std::string::npos);
  }
}

TEST_CASE("jitter ladder rescues a nearly singular matrix") {
  Matrix ones = Matrix::Constant(3, 3, 1.0);  // rank one
  CholFactor f = factor_with_jitter(ones, 1.0);
  CHECK(std::isfinite(f.log_det()));
  Matrix indefinite = -Matrix::Identity(2, 2);
  CHECK_THROWS(factor_with_jitter(indefinite, 1.0));
}
