#pragma once

// Spatial / spatio-temporal correlation functions, covariance assembly, and
// Cholesky services. Distances are Euclidean in km; the Matern argument
// convention is (h/phi)^nu K_nu(h/phi) / (2^{nu-1} Gamma(nu)), with no
// sqrt(2 nu) rescaling, so nu = 1/2 reduces exactly to exp(-h/phi).

#include <cmath>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "dast/data.hpp"

namespace dast {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline double exp_corr(double u, double range) {
  if (!(range > 0.0) || !(u >= 0.0) || !std::isfinite(u))
    throw std::invalid_argument("exp_corr: need u >= 0 and range > 0");
  return std::exp(-u / range);
}

inline double matern_corr(double h, double phi, double nu) {
  if (!(phi > 0.0) || !(nu > 0.0) || !(h >= 0.0) || !std::isfinite(h))
    throw std::invalid_argument("matern_corr: need h >= 0, phi > 0, nu > 0");
  if (h == 0.0) return 1.0;
  double x = h / phi;
  if (x > 705.0) return 0.0;  // K_nu underflows together with exp(-x)
  double log_norm = (nu - 1.0) * std::log(2.0) + std::lgamma(nu);
  double value =
      std::exp(nu * std::log(x) - log_norm) * std::cyl_bessel_k(nu, x);
  return std::min(1.0, std::max(0.0, value));
}

struct MaternSpec {
  double sigma2 = 1.0;
  double phi = 1.0;   // spatial range, km
  double nu = 0.5;    // fixed during optimisation

  double corr(double h, double /*dt*/) const { return matern_corr(h, phi, nu); }
};

struct SeparableSpec {
  double sigma2 = 1.0;
  double phi = 1.0;    // spatial range, km
  double psi_t = 1.0;  // temporal range, years

  double corr(double h, double dt) const {
    return std::exp(-h / phi - dt / psi_t);
  }
};

using CovSpec = std::variant<MaternSpec, SeparableSpec>;

inline double cov_sigma2(const CovSpec& spec) {
  return std::visit([](const auto& s) { return s.sigma2; }, spec);
}

struct PointTime {
  Location loc;
  double t = 0.0;
};

// Sigma_ij = sigma2 * rho_S(||xi-xj||) * rho_T(|ti-tj|) + jitter * 1(i=j).
// The upper triangle is computed and mirrored, so the result is symmetric
// to bit equality.
inline Matrix build_cov(const std::vector<PointTime>& points,
                        const CovSpec& spec, double jitter = 0.0) {
  const auto n = static_cast<Eigen::Index>(points.size());
  if (n == 0) throw std::invalid_argument("build_cov: no points");
  double sigma2 = cov_sigma2(spec);
  Matrix sigma(n, n);
  std::visit(
      [&](const auto& s) {
        for (Eigen::Index i = 0; i < n; ++i) {
          sigma(i, i) = sigma2 + jitter;
          for (Eigen::Index j = i + 1; j < n; ++j) {
            double h = distance(points[i].loc, points[j].loc);
            double dt = std::abs(points[i].t - points[j].t);
            double v = sigma2 * s.corr(h, dt);
            sigma(i, j) = v;
            sigma(j, i) = v;
          }
        }
      },
      spec);
  return sigma;
}

// Dense Cholesky with the log-determinant kept around for Gaussian
// densities. Factorisation failure reports the leading minor that went
// non-positive.
class CholFactor {
 public:
  explicit CholFactor(const Matrix& sigma) {
    llt_.compute(sigma);
    if (llt_.info() != Eigen::Success)
      throw std::runtime_error(
          "Cholesky factorisation failed at leading minor " +
          std::to_string(find_bad_minor(sigma)));
    log_det_ = 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
  }

  Vector solve(const Vector& b) const { return llt_.solve(b); }
  Matrix solve(const Matrix& b) const { return llt_.solve(b); }

  // L with Sigma = L L^T
  const auto matrix_l() const { return llt_.matrixL(); }
  const auto matrix_u() const { return llt_.matrixU(); }

  double log_det() const { return log_det_; }

  double quad_form(const Vector& b) const {
    Vector z = llt_.matrixL().solve(b);
    return z.squaredNorm();
  }

  // log N(x; 0, Sigma)
  double gaussian_logpdf(const Vector& x) const {
    constexpr double log2pi = 1.8378770664093454835606594728112;
    return -0.5 * (static_cast<double>(x.size()) * log2pi + log_det_ +
                   quad_form(x));
  }

 private:
  static Eigen::Index find_bad_minor(const Matrix& sigma) {
    Matrix a = sigma;
    const Eigen::Index n = a.rows();
    for (Eigen::Index j = 0; j < n; ++j) {
      double d = a(j, j);
      for (Eigen::Index k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
      if (!(d > 0.0)) return j + 1;
      a(j, j) = std::sqrt(d);
      for (Eigen::Index i = j + 1; i < n; ++i) {
        double s = a(i, j);
        for (Eigen::Index k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
        a(i, j) = s / a(j, j);
      }
    }
    return n;
  }

  Eigen::LLT<Matrix> llt_;
  double log_det_ = 0.0;
};

inline Vector chol_solve(const Matrix& sigma, const Vector& b) {
  return CholFactor(sigma).solve(b);
}

// Factorise sigma2*R + jitter*I, escalating the jitter if the matrix is
// numerically indefinite: 1e-8, 1e-6, 1e-4 (all relative to sigma2).
inline CholFactor factor_with_jitter(const Matrix& sigma, double sigma2) {
  const double ladder[] = {1e-8, 1e-6, 1e-4};
  std::string last_error;
  for (double rel : ladder) {
    Matrix jittered = sigma;
    jittered.diagonal().array() += rel * sigma2;
    try {
      return CholFactor(jittered);
    } catch (const std::runtime_error& e) {
      last_error = e.what();
    }
  }
  throw std::runtime_error("covariance not positive definite after jitter: " +
                           last_error);
}

}  // namespace dast
