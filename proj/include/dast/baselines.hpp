#pragma once

// Comparator models, all carrying the cumulative-rounds covariate c(x,t):
//   GLM    logit P = b0 + b1 c
//   GLMM   logit P = b0 + b1 c + Z_i,  Z_i iid N(0, sigma2)
//   S      logit P = b0 + b1 c + S(x)
//   ST     logit P = b0 + b1 c + S(x,t), separable double-exponential
// The GLMM marginal likelihood uses per-record adaptive Gauss-Hermite
// quadrature; the MCML machinery with a diagonal covariance provides an
// independent cross-check route. S and ST reuse the MCML fit directly.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "dast/glm.hpp"
#include "dast/inference.hpp"
#include "dast/predict.hpp"
#include "dast/validate.hpp"

namespace dast {

struct BaselineSpec {
  ModelKind kind = ModelKind::glm;
  bool include_cumulative_mda = true;
};

inline GlmFit fit_glm(const Dataset& ds, bool include_cumulative_mda = true) {
  ModelOptions opts;
  opts.include_cumulative_mda = include_cumulative_mda;
  LatentModel model = make_latent_model(ds, ModelKind::glm, opts);
  return irls_fit(model.design, model.positive, model.examined);
}

namespace gauss_hermite {

struct Rule {
  std::vector<double> nodes;
  std::vector<double> log_weights;  // log w_j + x_j^2, ready for log-space use
};

// Golub-Welsch on the Hermite Jacobi matrix.
inline Rule rule(int n) {
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    double b = std::sqrt(k / 2.0);
    j(k, k - 1) = b;
    j(k - 1, k) = b;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(j);
  Rule out;
  out.nodes.resize(n);
  out.log_weights.resize(n);
  constexpr double log_sqrt_pi = 0.5723649429247001;
  for (int k = 0; k < n; ++k) {
    double x = eig.eigenvalues()(k);
    double v0 = eig.eigenvectors()(0, k);
    out.nodes[k] = x;
    out.log_weights[k] = log_sqrt_pi + 2.0 * std::log(std::abs(v0)) + x * x;
  }
  return out;
}

}  // namespace gauss_hermite

struct GlmmFit {
  Eigen::VectorXd beta;
  double sigma2 = 0.0;
  Eigen::VectorXd se;  // (beta..., log sigma2)
  double loglik = 0.0;
  bool converged = false;
  bool sigma2_boundary = false;  // variance ran to ~0
};

namespace detail {

// log integral over one record's random effect, 20-node adaptive GH
// centred and scaled at the conditional mode.
inline double glmm_record_loglik(int y, int m, double offset, double sigma2,
                                 const gauss_hermite::Rule& gh) {
  // conditional mode of log Bin(y; invlogit(offset+z)) - z^2/(2 sigma2)
  double z = 0.0;
  for (int it = 0; it < 50; ++it) {
    double p = inverse_logit(offset + z);
    double g = y - m * p - z / sigma2;
    double h = -m * p * (1.0 - p) - 1.0 / sigma2;
    double step = g / h;
    z -= step;
    if (std::abs(step) < 1e-10) break;
  }
  double p_mode = inverse_logit(offset + z);
  double curv = m * p_mode * (1.0 - p_mode) + 1.0 / sigma2;
  double scale = 1.0 / std::sqrt(curv);

  constexpr double log2pi = 1.8378770664093454835606594728112;
  double lse = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(gh.nodes.size());
  for (std::size_t k = 0; k < gh.nodes.size(); ++k) {
    double zk = z + std::sqrt(2.0) * scale * gh.nodes[k];
    double pk = std::clamp(inverse_logit(offset + zk), 1e-14, 1.0 - 1e-14);
    double logf = y * std::log(pk) + (m - y) * std::log1p(-pk) -
                  0.5 * (std::log(sigma2) + log2pi + zk * zk / sigma2);
    terms[k] = gh.log_weights[k] + logf;
    lse = std::max(lse, terms[k]);
  }
  double sum = 0.0;
  for (double t : terms) sum += std::exp(t - lse);
  return 0.5 * std::log(2.0) + std::log(scale) + lse + std::log(sum) +
         log_choose(m, y);
}

}  // namespace detail

inline double glmm_marginal_loglik(const Eigen::MatrixXd& x,
                                   const Eigen::VectorXi& y,
                                   const Eigen::VectorXi& m,
                                   const Eigen::VectorXd& beta, double sigma2,
                                   const gauss_hermite::Rule& gh) {
  Eigen::VectorXd eta = x * beta;
  double total = 0.0;
  for (int i = 0; i < y.size(); ++i)
    total += detail::glmm_record_loglik(y[i], m[i], eta[i], sigma2, gh);
  return total;
}

// Maximum likelihood on (beta, log sigma2) with finite-difference
// gradients; fix_sigma2 >= 0 pins the variance (0 reproduces the GLM).
inline GlmmFit fit_glmm(const Dataset& ds, bool include_cumulative_mda = true,
                        double fix_sigma2 = -1.0, int gh_nodes = 20) {
  ModelOptions opts;
  opts.include_cumulative_mda = include_cumulative_mda;
  LatentModel model = make_latent_model(ds, ModelKind::glmm, opts);
  if (model.n_records() < 2)
    throw std::invalid_argument("GLMM needs at least 2 records");
  auto gh = gauss_hermite::rule(gh_nodes);
  const int p = static_cast<int>(model.design.cols());

  GlmFit glm = irls_fit(model.design, model.positive, model.examined);
  GlmmFit out;

  if (fix_sigma2 == 0.0) {
    out.beta = glm.beta;
    out.sigma2 = 0.0;
    out.sigma2_boundary = true;
    out.se = Eigen::VectorXd::Zero(p + 1);
    out.se.head(p) = glm.se;
    out.loglik = glm.loglik;
    out.converged = glm.converged;
    return out;
  }

  auto objective = [&](const Vector& v, Vector& grad) {
    Eigen::VectorXd beta = v.head(p);
    double sigma2 = fix_sigma2 > 0.0 ? fix_sigma2 : std::exp(v[p]);
    double f = -glmm_marginal_loglik(model.design, model.positive,
                                     model.examined, beta, sigma2, gh);
    // central differences; the parameter count is tiny
    for (int j = 0; j < v.size(); ++j) {
      double h = 1e-5 * std::max(1.0, std::abs(v[j]));
      Vector hi = v, lo = v;
      hi[j] += h;
      lo[j] -= h;
      Eigen::VectorXd bh = hi.head(p), bl = lo.head(p);
      double sh = fix_sigma2 > 0.0 ? fix_sigma2 : std::exp(hi[p]);
      double sl = fix_sigma2 > 0.0 ? fix_sigma2 : std::exp(lo[p]);
      double fh = -glmm_marginal_loglik(model.design, model.positive,
                                        model.examined, bh, sh, gh);
      double fl = -glmm_marginal_loglik(model.design, model.positive,
                                        model.examined, bl, sl, gh);
      grad[j] = (fh - fl) / (2.0 * h);
    }
    return f;
  };

  Vector v0(p + 1);
  v0.head(p) = glm.beta;
  v0[p] = std::log(1.0);
  OptimOptions oo;
  oo.grad_tol = 1e-6;
  oo.max_iters = 300;
  OptimResult opt = minimize_bfgs(objective, v0, oo);

  out.beta = opt.x.head(p);
  out.sigma2 = std::exp(opt.x[p]);
  out.loglik = -opt.value;
  out.converged = opt.converged;
  out.sigma2_boundary = out.sigma2 < 1e-6;

  // observed-information SEs via finite differences of the FD gradient
  const int d = p + 1;
  Matrix hess(d, d);
  Vector g_hi(d), g_lo(d);
  for (int j = 0; j < d; ++j) {
    double h = 1e-4 * std::max(1.0, std::abs(opt.x[j]));
    Vector hi = opt.x, lo = opt.x;
    hi[j] += h;
    lo[j] -= h;
    objective(hi, g_hi);
    objective(lo, g_lo);
    hess.col(j) = (g_hi - g_lo) / (2.0 * h);
  }
  hess = 0.5 * (hess + hess.transpose()).eval();
  Eigen::LDLT<Matrix> ldlt(hess);
  Matrix cov = ldlt.solve(Matrix::Identity(d, d));
  out.se = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  return out;
}

// S and ST comparators ride on the MCML machinery.
inline FitResult fit_spatial(const Dataset& ds, ModelKind kind,
                             const McmlConfig& cfg,
                             bool include_cumulative_mda = true) {
  if (kind != ModelKind::spatial_s && kind != ModelKind::spacetime_st)
    throw std::invalid_argument("fit_spatial expects kind s or st");
  ModelOptions opts;
  opts.include_cumulative_mda = include_cumulative_mda;
  LatentModel model = make_latent_model(ds, kind, opts);
  Params init = initial_params(ds, model);
  PenaltySpec off;
  return fit_model(model, init, cfg, off);
}

// ---- hold-out predictive distributions -----------------------------------

// Exact CDFs for the GLM: fixed-effect prediction only.
inline std::vector<PredictiveCdf> holdout_cdfs_glm(const GlmFit& fit,
                                                   const Dataset& test,
                                                   bool include_cumulative_mda = true) {
  ModelOptions opts;
  opts.include_cumulative_mda = include_cumulative_mda;
  LatentModel tm = make_latent_model(test, ModelKind::glm, opts);
  Eigen::VectorXd eta = tm.design * fit.beta;
  std::vector<PredictiveCdf> out;
  for (int i = 0; i < tm.n_records(); ++i)
    out.push_back(PredictiveCdf::binomial(tm.examined[i],
                                          inverse_logit(eta[i])));
  return out;
}

// Monte Carlo staircase CDFs for the GLMM: a fresh unstructured effect per
// test record and draw.
inline std::vector<PredictiveCdf> holdout_cdfs_glmm(
    const GlmmFit& fit, const Dataset& test, int n_draws, std::uint64_t seed,
    bool include_cumulative_mda = true) {
  ModelOptions opts;
  opts.include_cumulative_mda = include_cumulative_mda;
  LatentModel tm = make_latent_model(test, ModelKind::glmm, opts);
  Eigen::VectorXd eta = tm.design * fit.beta;
  double sd = std::sqrt(std::max(fit.sigma2, 0.0));
  std::vector<PredictiveCdf> out;
  for (int i = 0; i < tm.n_records(); ++i) {
    Rng rng = Rng::substream(seed, "cdf", static_cast<std::uint64_t>(i));
    std::vector<int> draws(n_draws);
    for (int l = 0; l < n_draws; ++l) {
      double p = inverse_logit(eta[i] + sd * rng.normal());
      draws[l] = rng.binomial(tm.examined[i], p);
    }
    out.push_back(PredictiveCdf::from_draws(draws, tm.examined[i]));
  }
  return out;
}

// Monte Carlo staircase CDFs for latent-field fits (DAST, S, ST):
// conditional simulation of the field at the test sites given the stored
// samples, decay-adjusted for DAST.
inline std::vector<PredictiveCdf> holdout_cdfs_latent(
    const FitResult& fit, const LatentModel& train_model, const Dataset& full,
    const Dataset& test, int n_draws, std::uint64_t seed) {
  ModelOptions opts = train_model.options;
  LatentModel tm = make_latent_model(test, train_model.kind, opts);
  if (tm.design.cols() != train_model.design.cols())
    throw std::runtime_error("test design width differs from training design");

  std::vector<PointTime> targets;
  for (const auto& r : test.records) targets.push_back({r.loc, r.t});
  Rng rng = Rng::substream(seed, "cdf-latent");
  Matrix latent = detail::latent_draws_at_targets(fit, train_model, targets,
                                                  n_draws, rng);
  Vector beta = Eigen::Map<const Vector>(fit.estimate.beta.data(),
                                         fit.estimate.beta.size());
  Vector base = tm.design * beta;
  LatentModel::DecayCache decay = tm.decay_cache(fit.estimate);

  std::vector<PredictiveCdf> out;
  for (int i = 0; i < tm.n_records(); ++i) {
    Rng rec_rng = Rng::substream(seed, "cdf", static_cast<std::uint64_t>(i));
    std::vector<int> draws(n_draws);
    for (int l = 0; l < n_draws; ++l) {
      double p = inverse_logit(base[i] + latent(i, l)) *
                 std::exp(decay.log_factor[i]);
      draws[l] = rec_rng.binomial(tm.examined[i], p);
    }
    out.push_back(PredictiveCdf::from_draws(draws, tm.examined[i]));
  }
  return out;
}

}  // namespace dast
