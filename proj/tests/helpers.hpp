#pragma once

// Shared test fixtures and independent oracles. Everything here is
// deliberately implemented by the most direct route available (quadrature,
// enumeration, textbook iterations) rather than through the library's own
// computational paths.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dast/data.hpp"
#include "dast/inference.hpp"
#include "dast/model.hpp"

namespace test_helpers {

using dast::Dataset;
using dast::LatentModel;
using dast::Location;
using dast::MdaHistory;
using dast::Params;
using dast::SurveyRecord;

struct TinySpec {
  std::vector<Location> locations;
  std::vector<double> times;
  std::vector<int> y;
  std::vector<int> m;
  std::vector<double> mda_rounds;  // shared by the single IU
};

inline Dataset tiny_dataset(const TinySpec& spec) {
  Dataset ds;
  dast::ImplementationUnit iu;
  iu.id = "A";
  iu.polygons.push_back({{-1e6, -1e6}, {1e6, -1e6}, {1e6, 1e6}, {-1e6, 1e6}});
  ds.ius.emplace("A", iu);
  MdaHistory h;
  h.iu_id = "A";
  h.round_times = spec.mda_rounds;
  h.normalise();
  ds.mda.emplace("A", h);
  for (std::size_t i = 0; i < spec.locations.size(); ++i) {
    SurveyRecord r;
    r.loc = spec.locations[i];
    r.t = spec.times[i];
    r.examined = spec.m[i];
    r.positive = spec.y[i];
    r.iu_id = "A";
    ds.records.push_back(r);
  }
  return ds;
}

// log( integral exp(f(s)) ds ) by Simpson's rule on [lo, hi]
inline double log_integral_1d(const std::function<double(double)>& log_f,
                              double lo, double hi, int n_panels = 4000) {
  int n = 2 * n_panels;  // Simpson needs an even number of intervals
  double h = (hi - lo) / n;
  std::vector<double> vals(n + 1);
  double vmax = -1e300;
  for (int i = 0; i <= n; ++i) {
    vals[i] = log_f(lo + i * h);
    vmax = std::max(vmax, vals[i]);
  }
  double acc = 0.0;
  for (int i = 0; i <= n; ++i) {
    double w = (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    acc += w * std::exp(vals[i] - vmax);
  }
  return vmax + std::log(acc * h / 3.0);
}

// 2-D tensor Simpson for bivariate latent toys
inline double log_integral_2d(
    const std::function<double(double, double)>& log_f, double lo1, double hi1,
    double lo2, double hi2, int n_panels = 160) {
  int n = 2 * n_panels;
  double h1 = (hi1 - lo1) / n;
  double h2 = (hi2 - lo2) / n;
  std::vector<std::vector<double>> vals(n + 1, std::vector<double>(n + 1));
  double vmax = -1e300;
  for (int i = 0; i <= n; ++i)
    for (int j = 0; j <= n; ++j) {
      vals[i][j] = log_f(lo1 + i * h1, lo2 + j * h2);
      vmax = std::max(vmax, vals[i][j]);
    }
  auto w = [n](int i) {
    return (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
  };
  double acc = 0.0;
  for (int i = 0; i <= n; ++i)
    for (int j = 0; j <= n; ++j)
      acc += w(i) * w(j) * std::exp(vals[i][j] - vmax);
  return vmax + std::log(acc * h1 * h2 / 9.0);
}

// Marginal log-likelihood of a latent model by direct quadrature; exact
// up to quadrature error for 1 or 2 latent sites.
inline double quadrature_marginal_loglik(const LatentModel& model,
                                         const Params& p) {
  double sd = std::sqrt(p.sigma2);
  auto loglik_given = [&](const dast::Vector& s) {
    return dast::cond_loglik(model, p, s);
  };
  if (model.n_sites() == 1) {
    auto log_f = [&](double s) {
      dast::Vector v(1);
      v[0] = s;
      constexpr double log2pi = 1.8378770664093454835606594728112;
      double prior = -0.5 * (log2pi + std::log(p.sigma2) + s * s / p.sigma2);
      return prior + loglik_given(v);
    };
    return log_integral_1d(log_f, -12 * sd, 12 * sd);
  }
  if (model.n_sites() == 2) {
    dast::Matrix sigma =
        dast::build_cov(model.sites,
                        dast::CovSpec{dast::MaternSpec{p.sigma2, p.phi, 0.5}},
                        0.0);
    dast::CholFactor chol(sigma);
    auto log_f = [&](double s1, double s2) {
      dast::Vector v(2);
      v << s1, s2;
      return chol.gaussian_logpdf(v) + loglik_given(v);
    };
    return log_integral_2d(log_f, -10 * sd, 10 * sd, -10 * sd, 10 * sd);
  }
  throw std::invalid_argument("quadrature oracle handles 1 or 2 sites only");
}

// Textbook Newton-Raphson on the binomial log-likelihood, independent of
// the library's IRLS route.
inline Eigen::VectorXd newton_glm_oracle(const Eigen::MatrixXd& x,
                                         const Eigen::VectorXi& y,
                                         const Eigen::VectorXi& m) {
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(x.cols());
  for (int it = 0; it < 200; ++it) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(x.cols());
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(x.cols(), x.cols());
    for (int i = 0; i < y.size(); ++i) {
      double eta = x.row(i).dot(beta);
      double p = 1.0 / (1.0 + std::exp(-eta));
      grad += (y[i] - m[i] * p) * x.row(i).transpose();
      hess -= m[i] * p * (1.0 - p) * x.row(i).transpose() * x.row(i);
    }
    Eigen::VectorXd step = hess.fullPivLu().solve(grad);
    beta -= step;
    if (step.lpNorm<Eigen::Infinity>() < 1e-12) break;
  }
  return beta;
}

}  // namespace test_helpers
