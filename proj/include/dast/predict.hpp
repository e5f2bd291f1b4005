#pragma once

// Plug-in prediction: conditional simulation of the latent field at target
// points given the stored conditional samples at the data sites, pushed
// through the linear predictor and the MDA decay adjustment. Areal
// prevalence is a lattice (or community-list) average per IU, summarised
// across draws. Forecasting searches the number of additional annual
// rounds needed to reach a prevalence threshold.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dast/inference.hpp"
#include "dast/likelihood.hpp"
#include "dast/model.hpp"

namespace dast {

struct PredictionGrid {
  std::vector<Location> points;
  std::vector<std::string> iu_ids;  // empty string: outside every IU
  std::vector<double> weights;      // empty: equal weights
  std::vector<std::vector<double>> covariates;  // empty: intercept-only

  std::size_t size() const { return points.size(); }
};

// Regular lattice clipped to each IU polygon (default spacing 5 km), or
// the community point list for point-based IUs. Weights come from the
// IU population surface by nearest-point lookup when present.
inline PredictionGrid make_grid(const std::map<std::string, ImplementationUnit>& ius,
                                double spacing_km = 5.0) {
  if (!(spacing_km > 0.0)) throw std::invalid_argument("grid spacing must be > 0");
  PredictionGrid grid;
  bool any_weights = false;
  for (const auto& [id, iu] : ius) {
    std::vector<Location> candidates;
    if (!iu.polygons.empty()) {
      double min_x = 1e300, min_y = 1e300, max_x = -1e300, max_y = -1e300;
      for (const auto& ring : iu.polygons)
        for (const auto& p : ring) {
          min_x = std::min(min_x, p.x);
          min_y = std::min(min_y, p.y);
          max_x = std::max(max_x, p.x);
          max_y = std::max(max_y, p.y);
        }
      for (double y = min_y + 0.5 * spacing_km; y < max_y; y += spacing_km)
        for (double x = min_x + 0.5 * spacing_km; x < max_x; x += spacing_km)
          if (iu.contains({x, y})) candidates.push_back({x, y});
    }
    for (const auto& p : iu.points) candidates.push_back(p);
    for (const auto& p : candidates) {
      grid.points.push_back(p);
      grid.iu_ids.push_back(id);
      if (iu.population_weight) {
        grid.weights.push_back(iu.population_weight->at(p));
        any_weights = true;
      } else {
        grid.weights.push_back(1.0);
      }
    }
  }
  if (!any_weights) grid.weights.clear();
  return grid;
}

struct PointPredictions {
  Matrix draws;  // n_points x n_draws of P(x, t)
  std::vector<bool> no_mda_adjustment;  // target outside every IU
};

namespace detail {

inline Matrix target_design(const PredictionGrid& grid, int p) {
  const auto n = static_cast<Eigen::Index>(grid.size());
  Matrix x(n, p);
  if (!grid.covariates.empty()) {
    if (grid.covariates.size() != grid.size())
      throw std::invalid_argument("grid covariate rows != grid points");
    for (Eigen::Index i = 0; i < n; ++i) {
      if (static_cast<int>(grid.covariates[i].size()) != p)
        throw std::invalid_argument("grid covariate width != design width");
      for (int c = 0; c < p; ++c) x(i, c) = grid.covariates[i][c];
    }
  } else if (p == 1) {
    x.setOnes();
  } else {
    throw std::invalid_argument(
        "model has covariates; prediction grid must supply them");
  }
  return x;
}

// Conditional draws of the latent field at targets given the stored
// conditional samples at the data sites (plug-in parameters).
inline Matrix latent_draws_at_targets(const FitResult& fit,
                                      const LatentModel& model,
                                      const std::vector<PointTime>& targets,
                                      int n_draws, Rng& rng) {
  const int n_t = static_cast<int>(targets.size());
  if (!fit.samples) throw std::runtime_error("fit result carries no samples");
  const Matrix& s_data = fit.samples->draws;
  const int m = static_cast<int>(s_data.cols());
  const Params& p = fit.estimate;

  Matrix out(n_t, n_draws);
  if (model.kind == ModelKind::glmm) {
    // unstructured effects: new independent draw per point
    double sd = std::sqrt(p.sigma2);
    for (int j = 0; j < n_draws; ++j)
      for (int i = 0; i < n_t; ++i) out(i, j) = sd * rng.normal();
    return out;
  }

  // joint correlation over data sites and targets
  const int n_d = model.n_sites();
  std::vector<PointTime> all = model.sites;
  all.insert(all.end(), targets.begin(), targets.end());
  LatentModel probe = model;  // reuse the kind-specific correlation rule
  probe.sites = all;
  Matrix corr = probe.corr_derivs(p, false).corr;

  Matrix r_dd = corr.topLeftCorner(n_d, n_d);
  Matrix r_td = corr.bottomLeftCorner(n_t, n_d);
  Matrix r_tt = corr.bottomRightCorner(n_t, n_t);
  r_dd.diagonal().array() += 1e-8;
  Eigen::LLT<Matrix> llt(r_dd);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("data-site correlation not positive definite");
  Matrix reg = llt.solve(r_td.transpose());        // R_dd^{-1} R_dt
  Matrix cond = p.sigma2 * (r_tt - r_td * reg);    // conditional covariance
  cond = 0.5 * (cond + cond.transpose()).eval();
  cond.diagonal().array() += 1e-10 * p.sigma2;
  Eigen::LLT<Matrix> cond_llt(cond);
  if (cond_llt.info() != Eigen::Success)
    throw std::runtime_error("conditional covariance not positive definite");

  Vector z(n_t);
  for (int j = 0; j < n_draws; ++j) {
    const int l = static_cast<int>((static_cast<long>(j) * m) / n_draws) % m;
    Vector mu = reg.transpose() * s_data.col(l);
    for (int i = 0; i < n_t; ++i) z[i] = rng.normal();
    out.col(j) = mu + cond_llt.matrixL() * z;
  }
  return out;
}

}  // namespace detail

// Predictive samples of P(x, t) at the grid points, conditioning on the
// stored MALA draws (composition sampling) with parameters fixed at the
// estimate. Targets outside every IU get no MDA adjustment and a flag.
inline PointPredictions predict_points(const FitResult& fit,
                                       const LatentModel& model,
                                       const Dataset& ds,
                                       const PredictionGrid& grid, double t,
                                       int n_draws, std::uint64_t seed) {
  const int n_t = static_cast<int>(grid.size());
  if (n_t == 0) throw std::invalid_argument("empty prediction grid");
  if (n_draws < 1) throw std::invalid_argument("n_draws must be >= 1");
  Rng rng = Rng::substream(seed, "predict");

  Matrix x = detail::target_design(grid, static_cast<int>(model.design.cols()));
  Vector beta = Eigen::Map<const Vector>(fit.estimate.beta.data(),
                                         fit.estimate.beta.size());
  Vector base = x * beta;

  std::vector<PointTime> targets(n_t);
  for (int i = 0; i < n_t; ++i) targets[i] = {grid.points[i], t};
  Matrix latent = model.has_latent()
                      ? detail::latent_draws_at_targets(fit, model, targets,
                                                        n_draws, rng)
                      : Matrix::Zero(n_t, n_draws);

  PointPredictions out;
  out.no_mda_adjustment.assign(n_t, false);
  out.draws.resize(n_t, n_draws);
  for (int i = 0; i < n_t; ++i) {
    double logk = 0.0;
    if (model.has_decay()) {
      const MdaHistory* h = grid.iu_ids[i].empty()
                                ? nullptr
                                : ds.history_for(grid.iu_ids[i]);
      if (h) {
        logk = decay_terms(*h, t, fit.estimate.impact(),
                           model.options.impact_mode)
                   .log_factor;
      } else {
        out.no_mda_adjustment[i] = true;
      }
    }
    for (int j = 0; j < n_draws; ++j) {
      double p_star = inverse_logit(base[i] + latent(i, j));
      out.draws(i, j) = p_star * std::exp(logk);
    }
  }
  return out;
}

struct ArealPrediction {
  std::string iu_id;
  double t = 0.0;
  double mean = 0.0;
  std::map<double, double> quantiles;  // level -> value
  int n_draws = 0;
};

// Per-draw spatial average over each IU's grid points, then summarised
// across draws. weighted = false ignores any grid weights.
inline std::vector<ArealPrediction> predict_areal(const PointPredictions& preds,
                                                  const PredictionGrid& grid,
                                                  double t, bool weighted) {
  std::map<std::string, std::vector<int>> by_iu;
  for (int i = 0; i < static_cast<int>(grid.size()); ++i)
    if (!grid.iu_ids[i].empty()) by_iu[grid.iu_ids[i]].push_back(i);
  if (by_iu.empty()) throw std::invalid_argument("no grid point lies in any IU");

  const int n_draws = static_cast<int>(preds.draws.cols());
  std::vector<ArealPrediction> out;
  for (const auto& [iu, idx] : by_iu) {
    double total_w = 0.0;
    for (int i : idx)
      total_w += weighted && !grid.weights.empty() ? grid.weights[i] : 1.0;
    if (!(total_w > 0.0))
      throw std::runtime_error("IU " + iu + " has zero total weight");

    std::vector<double> areal(n_draws, 0.0);
    for (int i : idx) {
      double w = weighted && !grid.weights.empty() ? grid.weights[i] : 1.0;
      for (int j = 0; j < n_draws; ++j) areal[j] += w * preds.draws(i, j);
    }
    ArealPrediction ap;
    ap.iu_id = iu;
    ap.t = t;
    ap.n_draws = n_draws;
    double mean = 0.0;
    for (auto& v : areal) {
      v /= total_w;
      mean += v;
    }
    ap.mean = mean / n_draws;
    for (double q : {0.025, 0.5, 0.975}) ap.quantiles[q] = percentile(areal, q);
    out.push_back(std::move(ap));
  }
  return out;
}

struct RoundsForecast {
  int rounds = 0;             // valid when status == "ok"
  std::string status;         // "ok" | "already_below" | "exceeds_max"
  double mean_at_decision = 0.0;
  double exceedance_prob = 0.0;  // P(prevalence >= threshold) at decision
};

// Smallest number of additional annual rounds (administered at t0+1, ...,
// t0+k) whose plug-in predictive mean prevalence falls below the threshold.
// k = 0 is evaluated at t0 itself; k >= 1 is evaluated one year after the
// k-th round, immediately before any further round would be delivered.
inline std::vector<RoundsForecast> rounds_to_threshold(
    const FitResult& fit, const LatentModel& model, const Dataset& ds,
    const PredictionGrid& grid, double t0, double threshold, int max_rounds,
    int n_draws, std::uint64_t seed) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("threshold must lie in (0,1)");
  if (!model.has_decay())
    throw std::invalid_argument("rounds-to-threshold requires a DAST fit");
  const int n_t = static_cast<int>(grid.size());
  Rng rng = Rng::substream(seed, "predict");

  Matrix x = detail::target_design(grid, static_cast<int>(model.design.cols()));
  Vector beta = Eigen::Map<const Vector>(fit.estimate.beta.data(),
                                         fit.estimate.beta.size());
  Vector base = x * beta;
  std::vector<PointTime> targets(n_t);
  for (int i = 0; i < n_t; ++i) targets[i] = {grid.points[i], t0};
  Matrix latent = detail::latent_draws_at_targets(fit, model, targets, n_draws, rng);

  std::vector<RoundsForecast> out(n_t);
  ImpactParams impact = fit.estimate.impact();
  for (int i = 0; i < n_t; ++i) {
    const MdaHistory* h =
        grid.iu_ids[i].empty() ? nullptr : ds.history_for(grid.iu_ids[i]);
    MdaHistory base_history = h ? *h : MdaHistory{};

    bool decided = false;
    for (int k = 0; k <= max_rounds && !decided; ++k) {
      MdaHistory scenario = base_history;
      for (int j = 1; j <= k; ++j) scenario.round_times.push_back(t0 + j);
      scenario.normalise();
      double t_eval = k == 0 ? t0 : t0 + k + 1;
      double logk = decay_terms(scenario, t_eval, impact,
                                model.options.impact_mode)
                        .log_factor;
      double mean = 0.0;
      int above = 0;
      for (int j = 0; j < n_draws; ++j) {
        double p = inverse_logit(base[i] + latent(i, j)) * std::exp(logk);
        mean += p;
        if (p >= threshold) ++above;
      }
      mean /= n_draws;
      if (mean < threshold) {
        out[i].rounds = k;
        out[i].status = k == 0 ? "already_below" : "ok";
        out[i].mean_at_decision = mean;
        out[i].exceedance_prob = static_cast<double>(above) / n_draws;
        decided = true;
      } else if (k == max_rounds) {
        out[i].rounds = max_rounds;
        out[i].status = "exceeds_max";
        out[i].mean_at_decision = mean;
        out[i].exceedance_prob = static_cast<double>(above) / n_draws;
      }
    }
  }
  return out;
}

}  // namespace dast
