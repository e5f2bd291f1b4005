#pragma once

// The outer MCML loop: sample the latent field at the reference, maximise
// the Monte Carlo likelihood, move the reference to the maximiser, repeat
// until two consecutive iterations agree. Standard errors come from the
// Hessian of the MC objective at the maximum; parameter uncertainty is
// summarised by a parametric bootstrap with bias correction.

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "dast/glm.hpp"
#include "dast/likelihood.hpp"
#include "dast/model.hpp"
#include "dast/optim.hpp"
#include "dast/parallel.hpp"

namespace dast {

struct McmlConfig {
  int max_outer_iters = 10;
  double inner_grad_tol = 1e-6;
  int inner_max_iters = 200;
  double outer_param_tol = 1e-3;
  double outer_loglik_tol = 1e-2;
  MalaConfig mala;  // 10000 draws, 2000 burn-in, thinning 8
  std::uint64_t seed = 1;
  bool compute_hessian = true;
  bool keep_samples = true;  // retain final-draws for prediction

  // Lighter settings for simulation studies and bootstrap refits, where
  // many hundreds of fits run back to back. The outer tolerances widen in
  // step with the Monte Carlo noise of the smaller sample count.
  static McmlConfig fast(std::uint64_t seed) {
    McmlConfig c;
    c.seed = seed;
    c.mala.n_samples = 600;
    c.mala.burnin = 400;
    c.mala.thin = 2;
    c.inner_grad_tol = 1e-5;
    c.inner_max_iters = 120;
    c.max_outer_iters = 6;
    c.outer_param_tol = 0.02;
    c.outer_loglik_tol = 0.05;
    return c;
  }
};

struct FitResult {
  ModelKind kind = ModelKind::dast;
  ParamLayout layout;
  Params estimate;
  Vector estimate_transformed;
  Matrix hessian;          // transformed scale, at the maximum
  Vector se_transformed;
  Vector se_natural;       // delta method
  std::vector<std::pair<Vector, double>> outer_trace;  // (psi, rel logL_m)
  std::vector<double> ess_history;
  double mala_acceptance = 0.0;
  bool converged = false;
  bool penalty_used = false;
  PenaltySpec penalty;
  std::uint64_t seed = 0;
  int n_records = 0;
  int n_sites = 0;
  std::string warnings;
  std::shared_ptr<const ConditionalSamples> samples;  // drawn at estimate
  McmlConfig config;
};

namespace detail {

inline void append_warning(std::string& all, const std::string& w) {
  if (w.empty()) return;
  if (!all.empty()) all += "; ";
  all += w;
}

}  // namespace detail

// SEs from the observed information: sqrt(diag((-H)^{-1})) on the
// transformed scale, with a delta-method back-transformation. A singular
// Hessian is an error naming the flattest direction.
inline void standard_errors(FitResult& fit) {
  const int d = static_cast<int>(fit.hessian.rows());
  if (d == 0) throw std::runtime_error("no Hessian stored in fit result");
  Matrix neg_h = -fit.hessian;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(neg_h);
  double min_ev = eig.eigenvalues()(0);
  double max_ev = eig.eigenvalues()(d - 1);
  if (!(min_ev > 1e-12 * std::max(1.0, max_ev))) {
    int worst;
    eig.eigenvectors().col(0).cwiseAbs().maxCoeff(&worst);
    throw std::runtime_error(
        "observed information is singular along parameter '" +
        fit.layout.names()[worst] + "'");
  }
  Matrix cov = eig.eigenvectors() *
               eig.eigenvalues().cwiseInverse().asDiagonal() *
               eig.eigenvectors().transpose();
  fit.se_transformed = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  auto jac = fit.layout.jacobian_diag(fit.estimate);
  fit.se_natural.resize(d);
  for (int i = 0; i < d; ++i)
    fit.se_natural[i] = fit.se_transformed[i] * std::abs(jac[i]);
}

// Starting values: beta from a plain logistic regression; a crude alpha
// from the cumulative-rounds coefficient of an augmented GLM when that
// design is usable (alpha = 1 - exp(beta_c)); sigma2 and phi from an
// empirical variogram of working residuals on the logit scale. All are
// overridable by passing an explicit init to fit_model.
inline Params initial_params(const Dataset& ds, const LatentModel& model) {
  Params init;
  const int n = model.n_records();
  GlmFit glm = irls_fit(model.design, model.positive, model.examined);
  init.beta.assign(glm.beta.data(), glm.beta.data() + glm.beta.size());

  init.alpha = 0.5;
  init.gamma = 1.0;
  if (model.has_decay()) {
    Eigen::VectorXd c(n);
    bool varies = false;
    for (int i = 0; i < n; ++i) {
      const auto& r = ds.records[i];
      c[i] = cumulative_rounds(ds, r.iu_id, r.t);
      if (c[i] != c[0]) varies = true;
    }
    if (varies) {
      Matrix xc(n, model.design.cols() + 1);
      xc.leftCols(model.design.cols()) = model.design;
      xc.col(model.design.cols()) = c;
      try {
        GlmFit with_c = irls_fit(xc, model.positive, model.examined);
        double bc = with_c.beta[model.design.cols()];
        init.alpha = std::clamp(1.0 - std::exp(std::min(bc, 0.0)), 0.05, 0.95);
      } catch (const std::exception&) {
        // collinear c column; keep the default start
      }
    }
  }

  if (model.has_latent()) {
    Eigen::VectorXd eta = model.design * glm.beta;
    Eigen::VectorXd resid(n);
    for (int i = 0; i < n; ++i) {
      double emp = (model.positive[i] + 0.5) / (model.examined[i] + 1.0);
      resid[i] = logit(emp) - eta[i];
    }
    double mean = resid.mean();
    double var = (resid.array() - mean).square().sum() / std::max(1, n - 1);
    init.sigma2 = std::max(0.05, var);

    if (model.layout.has_phi) {
      // binned empirical semivariogram, exponential model by grid search
      double max_d = 0.0;
      for (int i = 0; i < model.n_sites(); ++i)
        for (int j = i + 1; j < model.n_sites(); ++j)
          max_d = std::max(max_d,
                           distance(model.sites[i].loc, model.sites[j].loc));
      if (max_d <= 0.0) {
        init.phi = 1.0;
      } else {
        const int n_bins = 12;
        std::vector<double> gamma_hat(n_bins, 0.0), dist_mid(n_bins, 0.0);
        std::vector<int> counts(n_bins, 0);
        double cap = 0.6 * max_d;
        for (int i = 0; i < n; ++i) {
          for (int j = i + 1; j < n; ++j) {
            double h = distance(model.sites[model.site_of[i]].loc,
                                model.sites[model.site_of[j]].loc);
            if (h <= 0.0 || h > cap) continue;
            int b = std::min(n_bins - 1,
                             static_cast<int>(n_bins * h / cap));
            gamma_hat[b] += 0.5 * (resid[i] - resid[j]) * (resid[i] - resid[j]);
            ++counts[b];
          }
        }
        double best_phi = 0.25 * max_d, best_sse = -1.0;
        for (int b = 0; b < n_bins; ++b) {
          dist_mid[b] = cap * (b + 0.5) / n_bins;
          if (counts[b] > 0) gamma_hat[b] /= counts[b];
        }
        for (int k = 0; k < 25; ++k) {
          double phi = max_d * std::exp(-4.0 + 4.0 * k / 24.0);  // log grid
          double sse = 0.0;
          for (int b = 0; b < n_bins; ++b) {
            if (counts[b] == 0) continue;
            double fitted = init.sigma2 * (1.0 - std::exp(-dist_mid[b] / phi));
            sse += counts[b] * (gamma_hat[b] - fitted) * (gamma_hat[b] - fitted);
          }
          if (best_sse < 0.0 || sse < best_sse) {
            best_sse = sse;
            best_phi = phi;
          }
        }
        init.phi = best_phi;
      }
    }
  }
  init.psi_t = 1.0;
  return init;
}

inline void check_fit_preconditions(const LatentModel& model) {
  if (model.kind == ModelKind::dast && model.n_sites() < 2)
    throw std::invalid_argument("spatial fit needs >= 2 distinct locations");
  if ((model.kind == ModelKind::spatial_s ||
       model.kind == ModelKind::spacetime_st) &&
      model.n_sites() < 3)
    throw std::invalid_argument("spatial fit needs >= 3 distinct locations");
  if (model.kind == ModelKind::spacetime_st) {
    std::map<double, int> times;
    for (const auto& s : model.sites) times[s.t] = 1;
    if (times.size() < 2)
      throw std::invalid_argument(
          "spatio-temporal model needs at least 2 distinct times");
  }
}

inline FitResult fit_model_psi(const LatentModel& model, const Vector& psi0,
                               const McmlConfig& cfg, const PenaltySpec& pen) {
  if (!model.has_latent())
    throw std::invalid_argument("fit_model handles latent models; use irls_fit for the GLM");
  check_fit_preconditions(model);

  FitResult fit;
  fit.kind = model.kind;
  fit.layout = model.layout;
  fit.penalty = pen;
  fit.penalty_used = pen.enabled;
  fit.seed = cfg.seed;
  fit.config = cfg;
  fit.n_records = model.n_records();
  fit.n_sites = model.n_sites();

  Vector psi = psi0;
  Params ref = model.layout.unpack(psi);

  OptimOptions inner;
  inner.max_iters = cfg.inner_max_iters;
  inner.grad_tol = cfg.inner_grad_tol;

  for (int outer = 0; outer < cfg.max_outer_iters; ++outer) {
    Rng rng = Rng::substream(cfg.seed, "fit", static_cast<std::uint64_t>(outer));
    ConditionalSamples samples = mala_sample(model, ref, cfg.mala, rng);
    detail::append_warning(fit.warnings, samples.warning);
    fit.mala_acceptance = samples.acceptance_rate;

    McObjective obj(model, samples.draws, ref, pen);
    auto negated = [&obj](const Vector& x, Vector& g) {
      double v = obj.evaluate(x, &g);
      g = -g;
      return -v;
    };
    OptimResult opt = minimize_bfgs(negated, psi, inner);
    double rel_ll = -opt.value;
    obj.evaluate(opt.x, nullptr);  // refresh ESS at the maximiser
    fit.ess_history.push_back(obj.last_ess());
    if (obj.ess_degenerate())
      detail::append_warning(fit.warnings,
                             "importance weights degenerate (ESS " +
                                 std::to_string(obj.last_ess()) + ")");

    double d_psi = (opt.x - psi).lpNorm<Eigen::Infinity>();
    fit.outer_trace.emplace_back(opt.x, rel_ll);
    psi = opt.x;
    ref = model.layout.unpack(psi);

    bool small = d_psi < cfg.outer_param_tol &&
                 std::abs(rel_ll) < cfg.outer_loglik_tol;
    if (small && outer > 0) {  // the last two maximisers agree
      fit.converged = true;
      break;
    }
  }
  if (!fit.converged)
    detail::append_warning(
        fit.warnings,
        "outer MCML loop stopped at max_outer_iters without meeting both "
        "tolerances");

  fit.estimate_transformed = psi;
  fit.estimate = ref;

  // final conditional samples at the estimate, reused for prediction and
  // for the observed-information Hessian
  Rng rng_final = Rng::substream(cfg.seed, "fit-final");
  auto final_samples = std::make_shared<ConditionalSamples>(
      mala_sample(model, ref, cfg.mala, rng_final));
  detail::append_warning(fit.warnings, final_samples->warning);
  fit.mala_acceptance = final_samples->acceptance_rate;

  if (cfg.compute_hessian) {
    McObjective obj(model, final_samples->draws, ref, pen);
    const int d = static_cast<int>(psi.size());
    fit.hessian.resize(d, d);
    // central differences of the analytic gradient
    for (int j = 0; j < d; ++j) {
      double h = 1e-4 * std::max(1.0, std::abs(psi[j]));
      Vector lo = psi, hi = psi;
      lo[j] -= h;
      hi[j] += h;
      Vector g_lo(d), g_hi(d);
      obj.evaluate(hi, &g_hi);
      obj.evaluate(lo, &g_lo);
      fit.hessian.col(j) = (g_hi - g_lo) / (2.0 * h);
    }
    fit.hessian = 0.5 * (fit.hessian + fit.hessian.transpose()).eval();
    try {
      standard_errors(fit);
    } catch (const std::exception& e) {
      detail::append_warning(fit.warnings, e.what());
    }
  }
  if (cfg.keep_samples) fit.samples = final_samples;
  return fit;
}

// Initial values on the natural and the transformed scale start the
// identical trajectory: both entries canonicalise to the packed vector.
inline FitResult fit_model(const LatentModel& model, const Params& init,
                           const McmlConfig& cfg, const PenaltySpec& pen) {
  return fit_model_psi(model, model.layout.pack(init), cfg, pen);
}

inline FitResult fit_model(const LatentModel& model, const Vector& init_psi,
                           const McmlConfig& cfg, const PenaltySpec& pen) {
  return fit_model_psi(model, init_psi, cfg, pen);
}

enum class PenaltyPolicy { off, on, automatic };

// Two-step strategy: fit unpenalised first; turn the penalty on only when
// alpha runs to its boundary, the outer loop fails to settle, or the alpha
// profile is flat at the maximum.
inline FitResult fit_dast_auto(const LatentModel& model, const Params& init,
                               const McmlConfig& cfg,
                               PenaltyPolicy policy = PenaltyPolicy::automatic,
                               PenaltySpec pen = PenaltySpec::beta_soft()) {
  if (policy == PenaltyPolicy::on) {
    pen.enabled = true;
    return fit_model(model, init, cfg, pen);
  }
  PenaltySpec off;
  FitResult fit = fit_model(model, init, cfg, off);
  if (policy == PenaltyPolicy::off || !model.layout.has_impact) return fit;

  bool boundary = fit.estimate.alpha > 0.99 || fit.estimate.alpha < 0.01;
  bool unstable = !fit.converged;
  bool flat = false;
  if (fit.hessian.size() > 0) {
    int ia = model.layout.index_of("logit_alpha");
    flat = std::abs(fit.hessian(ia, ia)) < 1e-3;
  }
  if (boundary || unstable || flat) {
    pen.enabled = true;
    FitResult penalised = fit_model(model, init, cfg, pen);
    detail::append_warning(penalised.warnings,
                           "penalty enabled by escalation policy (alpha " +
                               std::to_string(fit.estimate.alpha) + ")");
    return penalised;
  }
  return fit;
}

struct BootstrapResult {
  Matrix replicates;             // kept x dim, natural scale
  Matrix replicates_transformed; // kept x dim
  std::vector<double> point_bc;  // 2 theta_hat - mean(boot)
  std::vector<double> ci_lower;  // percentile 2.5
  std::vector<double> ci_upper;  // percentile 97.5
  std::vector<std::string> names;
  int b_requested = 0;
  int dropped = 0;
  bool high_drop_warning = false;
};

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile of empty vector");
  std::sort(v.begin(), v.end());
  double pos = q * (static_cast<double>(v.size()) - 1.0);
  auto lo = static_cast<std::size_t>(std::floor(pos));
  auto hi = static_cast<std::size_t>(std::ceil(pos));
  double w = pos - static_cast<double>(lo);
  return (1.0 - w) * v[lo] + w * v[hi];
}

// Simulate -> refit -> collect, reusing the fitted design. Replicates run
// in parallel on seed-derived substreams; failed or non-converged refits
// are dropped and counted.
inline BootstrapResult parametric_bootstrap(const LatentModel& model,
                                            const FitResult& fit, int b,
                                            std::uint64_t seed,
                                            McmlConfig refit_cfg,
                                            unsigned n_threads = 0) {
  if (b < 2) throw std::invalid_argument("bootstrap needs B >= 2");
  if (!fit.converged)
    throw std::invalid_argument("bootstrap requires a converged fit");

  const int dim = model.layout.size();
  refit_cfg.compute_hessian = false;
  refit_cfg.keep_samples = false;

  Matrix natural(b, dim), transformed(b, dim);
  std::vector<char> kept(b, 0);

  parallel_for(static_cast<std::size_t>(b), [&](std::size_t idx) {
    Rng rng = Rng::substream(seed, "bootstrap", idx);
    LatentModel replica = model;
    replica.positive = model.simulate_counts(fit.estimate, rng);
    McmlConfig cfg_b = refit_cfg;
    cfg_b.seed = detail::fnv1a("bootstrap-fit") ^ (seed + 0x9e3779b9ull * (idx + 1));
    try {
      FitResult refit = fit_model(replica, fit.estimate, cfg_b, fit.penalty);
      if (!refit.converged) return;
      auto nat = replica.layout.natural_values(refit.estimate);
      for (int k = 0; k < dim; ++k) {
        natural(idx, k) = nat[k];
        transformed(idx, k) = refit.estimate_transformed[k];
      }
      kept[idx] = 1;
    } catch (const std::exception&) {
      // dropped
    }
  }, n_threads);

  BootstrapResult out;
  out.b_requested = b;
  out.names = model.layout.natural_names();
  int n_kept = 0;
  for (int i = 0; i < b; ++i) n_kept += kept[i];
  out.dropped = b - n_kept;
  out.high_drop_warning = out.dropped > b / 5;
  if (n_kept < 2) throw std::runtime_error("bootstrap: fewer than 2 replicates converged");

  out.replicates.resize(n_kept, dim);
  out.replicates_transformed.resize(n_kept, dim);
  int row = 0;
  for (int i = 0; i < b; ++i) {
    if (!kept[i]) continue;
    out.replicates.row(row) = natural.row(i);
    out.replicates_transformed.row(row) = transformed.row(i);
    ++row;
  }

  auto hat = model.layout.natural_values(fit.estimate);
  out.point_bc.resize(dim);
  out.ci_lower.resize(dim);
  out.ci_upper.resize(dim);
  for (int k = 0; k < dim; ++k) {
    std::vector<double> col(out.replicates.col(k).data(),
                            out.replicates.col(k).data() + n_kept);
    double mean = 0.0;
    for (double v : col) mean += v;
    mean /= n_kept;
    out.point_bc[k] = 2.0 * hat[k] - mean;
    out.ci_lower[k] = percentile(col, 0.025);
    out.ci_upper[k] = percentile(col, 0.975);
  }
  return out;
}

}  // namespace dast
