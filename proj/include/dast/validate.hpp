#pragma once

// Probabilistic validation metrics: non-randomised PIT averages for
// calibration, the discrete CRPS for sharpness, and the standardised
// bias / RMSE pipeline used by the simulation study.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "dast/data.hpp"
#include "dast/impact.hpp"
#include "dast/rng.hpp"

namespace dast {

// Discrete predictive CDF over binomial outcomes 0..m. F(m) = 1 exactly.
struct PredictiveCdf {
  std::vector<double> values;  // F(0), ..., F(m)

  int max_outcome() const { return static_cast<int>(values.size()) - 1; }

  double at(int k) const {
    if (k < 0) return 0.0;
    if (k >= static_cast<int>(values.size())) return 1.0;
    return values[static_cast<std::size_t>(k)];
  }

  void validate() const {
    if (values.empty()) throw std::invalid_argument("empty predictive CDF");
    for (std::size_t i = 1; i < values.size(); ++i)
      if (values[i] < values[i - 1] - 1e-12)
        throw std::invalid_argument("predictive CDF is decreasing");
    if (std::abs(values.back() - 1.0) > 1e-6)
      throw std::invalid_argument("predictive CDF does not reach 1");
  }

  // Empirical staircase from Monte Carlo outcome draws.
  static PredictiveCdf from_draws(const std::vector<int>& outcomes, int m) {
    if (outcomes.empty()) throw std::invalid_argument("no predictive draws");
    PredictiveCdf f;
    f.values.assign(m + 1, 0.0);
    for (int y : outcomes) {
      int k = std::clamp(y, 0, m);
      f.values[static_cast<std::size_t>(k)] += 1.0;
    }
    double total = static_cast<double>(outcomes.size());
    double cum = 0.0;
    for (auto& v : f.values) {
      cum += v;
      v = cum / total;
    }
    f.values.back() = 1.0;
    return f;
  }

  // Exact binomial CDF for a fixed success probability (the closed-form
  // limit used for GLM forecasts).
  static PredictiveCdf binomial(int m, double p) {
    PredictiveCdf f;
    f.values.assign(m + 1, 0.0);
    double pmf = std::pow(1.0 - p, m);  // k = 0
    double cum = pmf;
    f.values[0] = cum;
    for (int k = 1; k <= m; ++k) {
      pmf *= (static_cast<double>(m - k + 1) / k) * (p / (1.0 - p));
      cum = std::min(1.0, cum + pmf);
      f.values[static_cast<std::size_t>(k)] = cum;
    }
    f.values.back() = 1.0;
    return f;
  }
};

struct NpitValue {
  double value = 0.0;
  bool degenerate = false;  // F(y) == F(y-1): interior branch undefined
};

// Non-randomised probability integral transform at level u for outcome y.
inline NpitValue npit(double u, int y, const PredictiveCdf& f) {
  if (!(u >= 0.0 && u <= 1.0)) throw std::invalid_argument("u must lie in [0,1]");
  double f_lo = f.at(y - 1);
  double f_hi = f.at(y);
  NpitValue out;
  if (f_hi <= f_lo) {
    out.degenerate = true;
    out.value = u >= f_hi ? 1.0 : 0.0;
    return out;
  }
  if (u <= f_lo) {
    out.value = 0.0;
  } else if (u >= f_hi) {
    out.value = 1.0;
  } else {
    out.value = (u - f_lo) / (f_hi - f_lo);
  }
  return out;
}

struct AnpitCurve {
  std::vector<double> u;
  std::vector<double> anpit;
  double sup_deviation = 0.0;  // sup |AnPIT(u) - u|
};

inline std::vector<double> uniform_grid(int n_points = 512) {
  std::vector<double> g(n_points);
  for (int i = 0; i < n_points; ++i)
    g[i] = static_cast<double>(i) / (n_points - 1);
  return g;
}

// AnPIT(u) = mean_i nPIT(u, y_i); identity for a calibrated model.
inline AnpitCurve anpit_curve(const std::vector<int>& observed,
                              const std::vector<PredictiveCdf>& cdfs,
                              const std::vector<double>& grid = uniform_grid()) {
  if (observed.empty()) throw std::invalid_argument("empty test set");
  if (observed.size() != cdfs.size())
    throw std::invalid_argument("one predictive CDF per test record required");
  AnpitCurve out;
  out.u = grid;
  out.anpit.resize(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double total = 0.0;
    for (std::size_t i = 0; i < observed.size(); ++i)
      total += npit(grid[g], observed[i], cdfs[i]).value;
    out.anpit[g] = total / static_cast<double>(observed.size());
    out.sup_deviation =
        std::max(out.sup_deviation, std::abs(out.anpit[g] - grid[g]));
  }
  return out;
}

// CRPS(F, y) = sum_{k=0}^{m} (F(k) - 1{k >= y})^2
inline double crps(int y, const PredictiveCdf& f) {
  double total = 0.0;
  for (int k = 0; k <= f.max_outcome(); ++k) {
    double ind = k >= y ? 1.0 : 0.0;
    double d = f.at(k) - ind;
    total += d * d;
  }
  return total;
}

inline double mean_crps(const std::vector<int>& observed,
                        const std::vector<PredictiveCdf>& cdfs) {
  if (observed.size() != cdfs.size() || observed.empty())
    throw std::invalid_argument("mean_crps: bad inputs");
  double total = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i)
    total += crps(observed[i], cdfs[i]);
  return total / static_cast<double>(observed.size());
}

// One predicted/true pair of IU-level prevalences.
struct IuPrediction {
  int iu = 0;         // IU index
  int t = 0;          // time index
  int replicate = 0;  // simulation replicate
  double p_hat = 0.0;
  double p_true = 0.0;
};

struct StandardisedMetrics {
  std::vector<int> times;
  std::vector<double> sbias;
  std::vector<double> srmse;
};

// The simulation-study pipeline: logit spread of predictions across
// replicates per (IU, t); delta-method spread on the prevalence scale;
// standardised errors averaged over IUs within replicate, then across
// replicates.
inline StandardisedMetrics standardised_metrics(
    const std::vector<IuPrediction>& rows) {
  if (rows.empty()) throw std::invalid_argument("no prediction rows");

  std::map<std::pair<int, int>, std::vector<double>> logits;  // (iu,t) -> per-rep
  for (const auto& r : rows)
    logits[{r.iu, r.t}].push_back(logit(r.p_hat));

  std::map<std::pair<int, int>, double> spread;  // S^L per (iu,t)
  for (auto& [key, v] : logits) {
    if (v.size() < 2)
      throw std::invalid_argument("standardised metrics need >= 2 replicates");
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    double sd = std::sqrt(ss / (static_cast<double>(v.size()) - 1.0));
    if (!(sd > 0.0))
      throw std::invalid_argument(
          "zero logit spread: predictions identical across replicates");
    spread[key] = sd;
  }

  // standardised errors, grouped (replicate, t)
  std::map<std::pair<int, int>, std::pair<double, double>> acc;  // sum e, sum e^2
  std::map<std::pair<int, int>, int> counts;
  for (const auto& r : rows) {
    double d = r.p_hat * (1.0 - r.p_hat);
    double s_p = d * spread[{r.iu, r.t}];
    double e = (r.p_hat - r.p_true) / s_p;
    if (!std::isfinite(e)) throw std::runtime_error("non-finite standardised error");
    auto key = std::make_pair(r.replicate, r.t);
    acc[key].first += e;
    acc[key].second += e * e;
    counts[key] += 1;
  }

  std::map<int, std::pair<double, double>> per_time;  // t -> (sum ebar, sum mse)
  std::map<int, int> reps_per_time;
  for (const auto& [key, sums] : acc) {
    int k = counts[key];
    per_time[key.second].first += sums.first / k;
    per_time[key.second].second += sums.second / k;
    reps_per_time[key.second] += 1;
  }

  StandardisedMetrics out;
  for (const auto& [t, sums] : per_time) {
    int r = reps_per_time[t];
    out.times.push_back(t);
    out.sbias.push_back(sums.first / r);
    out.srmse.push_back(std::sqrt(sums.second / r));
  }
  return out;
}

}  // namespace dast
