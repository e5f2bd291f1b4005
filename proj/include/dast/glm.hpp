#pragma once

// Binomial GLM via iteratively reweighted least squares. Shared by the
// comparator models and by the MCML initialisation heuristics.

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/SVD>

#include "dast/impact.hpp"

namespace dast {

struct GlmFit {
  Eigen::VectorXd beta;
  Eigen::VectorXd se;
  Eigen::MatrixXd cov;  // inverse Fisher information
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  bool separation = false;  // divergent coefficients flagged
};

inline GlmFit irls_fit(const Eigen::MatrixXd& x, const Eigen::VectorXi& y,
                       const Eigen::VectorXi& m, int max_iters = 100,
                       double tol = 1e-10) {
  const int n = static_cast<int>(x.rows());
  const int p = static_cast<int>(x.cols());
  if (y.size() != n || m.size() != n)
    throw std::invalid_argument("irls_fit: dimension mismatch");

  {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(x);
    double smin = svd.singularValues().tail(1)(0);
    if (!(smin > 1e-10 * svd.singularValues()(0)))
      throw std::runtime_error("design matrix is rank deficient");
  }

  GlmFit fit;
  fit.beta = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd xtwx(p, p);
  for (int iter = 0; iter < max_iters; ++iter) {
    fit.iterations = iter + 1;
    Eigen::VectorXd eta = x * fit.beta;
    Eigen::VectorXd w(n), z(n);
    for (int i = 0; i < n; ++i) {
      double pi = inverse_logit(eta[i]);
      double wi = std::max(m[i] * pi * (1.0 - pi), 1e-10);
      w[i] = wi;
      z[i] = eta[i] + (y[i] - m[i] * pi) / wi;
    }
    xtwx = x.transpose() * w.asDiagonal() * x;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(xtwx);
    Eigen::VectorXd beta_new = ldlt.solve(x.transpose() * (w.array() * z.array()).matrix());
    double delta = (beta_new - fit.beta).lpNorm<Eigen::Infinity>();
    fit.beta = beta_new;
    if (delta < tol) {
      fit.converged = true;
      break;
    }
  }
  fit.separation = fit.beta.lpNorm<Eigen::Infinity>() > 12.0 || !fit.converged;

  fit.cov = Eigen::LDLT<Eigen::MatrixXd>(xtwx).solve(
      Eigen::MatrixXd::Identity(p, p));
  fit.se = fit.cov.diagonal().cwiseMax(0.0).cwiseSqrt();

  Eigen::VectorXd eta = x * fit.beta;
  fit.loglik = 0.0;
  for (int i = 0; i < n; ++i) {
    double pi = std::clamp(inverse_logit(eta[i]), 1e-12, 1.0 - 1e-12);
    fit.loglik += y[i] * std::log(pi) + (m[i] - y[i]) * std::log1p(-pi) +
                  std::lgamma(m[i] + 1.0) - std::lgamma(y[i] + 1.0) -
                  std::lgamma(m[i] - y[i] + 1.0);
  }
  return fit;
}

}  // namespace dast
